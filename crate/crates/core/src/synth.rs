//! Synthetic patch grids for tests, demos and toy training.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::element::Element;
use crate::error::Result;
use crate::rng;
use crate::sfe::PatchGrid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthKind {
    /// Seeded standard normal.
    Noise,
    /// `(row + col) / (2G - 2)`, the same in every channel.
    Gradient,
    /// `+1` / `-1` by parity of `row + col`.
    Checker,
    Constant(f64),
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown synthetic kind `{0}` (expected noise, gradient, checker, constant[:VALUE])")]
pub struct UnknownKind(pub String);

impl FromStr for SynthKind {
    type Err = UnknownKind;

    /// `constant` alone means value 1; `constant:2.5` picks the value.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || UnknownKind(s.to_string());
        match s.trim().to_ascii_lowercase().as_str() {
            "noise" => Ok(Self::Noise),
            "gradient" => Ok(Self::Gradient),
            "checker" => Ok(Self::Checker),
            "constant" => Ok(Self::Constant(1.0)),
            other => {
                let v = other.strip_prefix("constant:").ok_or_else(bad)?;
                let v: f64 = v.parse().map_err(|_| bad())?;
                if v.is_finite() {
                    Ok(Self::Constant(v))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Noise => f.write_str("noise"),
            Self::Gradient => f.write_str("gradient"),
            Self::Checker => f.write_str("checker"),
            Self::Constant(v) => write!(f, "constant:{v}"),
        }
    }
}

/// A `G×G×C` grid of the given kind. Only `Noise` depends on `seed`.
pub fn gen_synthetic_features<T: Element>(kind: SynthKind, grid: usize, channels: usize, seed: u64) -> Result<PatchGrid<T>> {
    let shape = [grid, grid, channels];
    let t = match kind {
        SynthKind::Noise => rng::normal(&shape, &mut rng::stream(seed, "synth.noise"))?,
        SynthKind::Gradient => {
            let denom = (2 * grid.saturating_sub(1)).max(1) as f64;
            Tensor::from_fn(&shape, |i| {
                let cell = i / channels;
                T::from_f64((cell / grid + cell % grid) as f64 / denom)
            })?
        }
        SynthKind::Checker => Tensor::from_fn(&shape, |i| {
            let cell = i / channels;
            if (cell / grid + cell % grid).is_multiple_of(2) {
                T::one()
            } else {
                -T::one()
            }
        })?,
        SynthKind::Constant(v) => Tensor::full(&shape, T::from_f64(v))?,
    };
    PatchGrid::new(t)
}
