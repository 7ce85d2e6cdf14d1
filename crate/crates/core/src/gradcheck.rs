//! Central finite-difference checks of analytic gradients (64-bit).

use rand::seq::index::sample;
use thiserror::Error;

use crate::graph::{Gradients, Graph, Var};
use crate::params::ParamStore;
use crate::projector::Projector;
use crate::rng;
use crate::sfe::PatchGrid;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("function value not finite at {param}[{index}]")]
    NonFinite { param: String, index: usize },
    #[error("no analytic gradient for `{0}`")]
    MissingGradient(String),
    #[error("evaluation failed: {0}")]
    Eval(String),
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per parameter; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Seed of the coordinate sampler.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Max error over parameters whose name satisfies `pred`.
    pub fn max_where(&self, pred: impl Fn(&str) -> bool) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn finite_diff_check<F, E>(
    mut f: F,
    params: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64, E>,
    E: std::fmt::Display,
{
    if !(opts.step > 0.0) {
        return Err(GradCheckError::BadStep(opts.step));
    }
    let mut probe = params.clone();
    let mut report = Vec::new();
    for (name, value) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| GradCheckError::MissingGradient(name.to_string()))?;
        let n = value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut r = rng::stream(opts.seed, name);
                let mut idx = sample(&mut r, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let mut eval = |delta: f64| -> Result<f64, GradCheckError> {
                let mut data = value.to_vec();
                data[i] += delta;
                probe.insert(name, Tensor::new(value.shape(), data).expect("same shape"));
                let v = f(&probe).map_err(|e| GradCheckError::Eval(e.to_string()))?;
                if !v.is_finite() {
                    return Err(GradCheckError::NonFinite {
                        param: name.to_string(),
                        index: i,
                    });
                }
                Ok(v)
            };
            let plus = eval(opts.step)?;
            let minus = eval(-opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        probe.insert(name, value.clone());
        report.push(ParamCheck {
            name: name.to_string(),
            coords: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { params: report })
}

/// Builds a scalar loss with `build`, back-propagates, and checks the result
/// against finite differences of the same builder.
pub fn check_graph<F, E>(
    params: &ParamStore<f64>,
    mut build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>, bool) -> Result<Var, E>,
    E: std::fmt::Display,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params, true).map_err(|e| GradCheckError::Eval(e.to_string()))?;
    let grads = g
        .backward(loss)
        .map_err(|e| GradCheckError::Eval(e.to_string()))?;
    finite_diff_check(
        |p| {
            let mut g = Graph::new();
            let loss = build(&mut g, p, false)?;
            Ok::<f64, E>(g.value(loss).data()[0])
        },
        params,
        &grads,
        opts,
    )
}

/// End-to-end check of every projector parameter against the loss
/// `mse([spatial; patch], target)`.
pub fn check_projector(
    proj: &Projector<f64>,
    zp: &PatchGrid<f64>,
    target: &Tensor<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError> {
    let cfg = proj.config().clone();
    check_graph(
        proj.params(),
        |g, p, trainable| -> Result<Var, String> {
            let proj = Projector::with_params(&cfg, p.clone()).map_err(|e| e.to_string())?;
            let vars = proj.bind(g, trainable).map_err(|e| e.to_string())?;
            let r = proj.record(g, zp, &vars).map_err(|e| e.to_string())?;
            let pred = g.concat(&[r.spatial, r.patch], 0).map_err(|e| e.to_string())?;
            let t = g.constant(target.clone());
            g.mse(pred, t).map_err(|e| e.to_string())
        },
        opts,
    )
}
