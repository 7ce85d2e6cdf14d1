//! Prefill cost model and projector timing.
//!
//! Per decoder layer and token, the four attention projections cost
//! `8·D²` FLOPs and a 4×-wide two-layer MLP `16·D²`, giving the linear term
//! `24·T·D²`. Scores `QKᵀ` and the weighted sum `A·V` each cost `2·T²·D`,
//! giving the quadratic term `4·T²·D`.

use std::time::Duration;

use crate::element::Element;
use crate::projector::{BranchTimes, Projector, ProjectorError};
use crate::sfe::PatchGrid;

pub const LINEAR_COEFF: f64 = 24.0;
pub const QUADRATIC_COEFF: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillCost {
    pub linear: f64,
    pub quadratic: f64,
}

impl PrefillCost {
    pub fn total(&self) -> f64 {
        self.linear + self.quadratic
    }
}

/// Analytic prefill FLOPs for `tokens` tokens through `layers` blocks of width `dim`.
pub fn prefill_flops(tokens: usize, dim: usize, layers: usize) -> PrefillCost {
    let (t, d, l) = (tokens as f64, dim as f64, layers as f64);
    PrefillCost {
        linear: l * LINEAR_COEFF * t * d * d,
        quadratic: l * QUADRATIC_COEFF * t * t * d,
    }
}

/// Cost ratios `candidate / baseline`, term by term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefillRatio {
    pub linear: f64,
    pub quadratic: f64,
    pub total: f64,
}

pub fn prefill_ratio(candidate: usize, baseline: usize, dim: usize, layers: usize) -> PrefillRatio {
    let a = prefill_flops(candidate, dim, layers);
    let b = prefill_flops(baseline, dim, layers);
    PrefillRatio {
        linear: a.linear / b.linear,
        quadratic: a.quadratic / b.quadratic,
        total: a.total() / b.total(),
    }
}

/// Mean branch times over timed forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorTiming {
    pub iterations: usize,
    /// Mean over whole forward passes, including parameter binding and assembly.
    pub full: Duration,
    /// Pyramid, convolutions, fusion and the spatial MLP.
    pub spatial: Duration,
    /// The patch MLP.
    pub patch: Duration,
}

impl ProjectorTiming {
    /// Spatial branch time as a fraction of the full forward pass.
    pub fn spatial_share(&self) -> f64 {
        self.spatial.as_secs_f64() / self.full.as_secs_f64()
    }
}

/// Runs `warmup` untimed passes, then averages `iterations` timed ones on the calling thread.
pub fn time_projector<T: Element>(
    proj: &Projector<T>,
    zp: &PatchGrid<T>,
    warmup: usize,
    iterations: usize,
) -> Result<ProjectorTiming, ProjectorError> {
    let iterations = iterations.max(1);
    for _ in 0..warmup {
        std::hint::black_box(proj.forward(zp)?);
    }
    let mut sum = BranchTimes::default();
    for _ in 0..iterations {
        let (out, t) = proj.forward_timed(zp)?;
        std::hint::black_box(out);
        sum.spatial += t.spatial;
        sum.patch += t.patch;
        sum.total += t.total;
    }
    let n = iterations as u32;
    Ok(ProjectorTiming {
        iterations,
        full: sum.total / n,
        spatial: sum.spatial / n,
        patch: sum.patch / n,
    })
}
