//! Toy alignment training: plain gradient descent with halve-on-increase
//! step control.
//!
//! Each sample pairs a synthetic grid with a target for the whole visual
//! sequence (spatial rows then patch rows). Targets come from a "teacher"
//! projector with the same config but an unrelated seed, so the task is
//! exactly realizable and the loss has somewhere to go.

use thiserror::Error;

use crate::config::ProjectorConfig;
use crate::element::Element;
use crate::error::TensorError;
use crate::graph::{Gradients, Graph, Var};
use crate::params::ParamStore;
use crate::projector::{Projector, ProjectorError};
use crate::sfe::PatchGrid;
use crate::synth::{gen_synthetic_features, SynthKind};
use crate::tensor::Tensor;

/// Halvings tried per step before the step is given up as a no-op.
pub const MAX_HALVINGS: usize = 40;

const TEACHER_SALT: u64 = 0x7ea_c4e5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("learning rate must be finite and >= 0, got {0}")]
    BadLearningRate(f64),
    #[error("task is empty")]
    EmptyTask,
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct ToyTask<T: Element> {
    pub samples: Vec<(PatchGrid<T>, Tensor<T>)>,
    pub seed: u64,
}

impl<T: Element> ToyTask<T> {
    /// `count` noise grids and their teacher targets, all derived from `seed`.
    pub fn generate(cfg: &ProjectorConfig, count: usize, seed: u64) -> Result<Self, TrainError> {
        let mut teacher_cfg = cfg.clone();
        teacher_cfg.seed = seed ^ TEACHER_SALT;
        let teacher = Projector::<T>::init(&teacher_cfg)?;
        let samples = (0..count)
            .map(|i| {
                let zp = gen_synthetic_features(SynthKind::Noise, cfg.grid, cfg.enc_dim, seed.wrapping_add(i as u64))?;
                let target = teacher.forward(&zp)?.sequence.to_tensor();
                Ok((zp, target))
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(Self { samples, seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `losses[0]` is the initial loss, `losses[i]` the loss after step `i`.
    pub losses: Vec<f64>,
    /// Step size in effect at the end.
    pub final_lr: f64,
    /// Trial updates that raised the loss and were undone.
    pub rejected: usize,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Mean over samples of the per-sample MSE.
fn record_loss<T: Element>(
    proj: &Projector<T>,
    task: &ToyTask<T>,
    trainable: bool,
) -> Result<(Graph<T>, Var), TrainError> {
    let mut g = Graph::new();
    let vars = proj.bind(&mut g, trainable)?;
    let mut total: Option<Var> = None;
    for (zp, target) in &task.samples {
        let r = proj.record(&mut g, zp, &vars)?;
        let pred = g.concat(&[r.spatial, r.patch], 0)?;
        let t = g.constant(target.clone());
        let l = g.mse(pred, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = total.ok_or(TrainError::EmptyTask)?;
    let loss = g.scale(total, 1.0 / task.samples.len() as f64)?;
    Ok((g, loss))
}

/// Loss of `proj` on `task`, without gradients.
pub fn evaluate<T: Element>(proj: &Projector<T>, task: &ToyTask<T>) -> Result<f64, TrainError> {
    let (g, loss) = record_loss(proj, task, false)?;
    Ok(g.value(loss).data()[0].as_f64())
}

fn loss_and_grad<T: Element>(proj: &Projector<T>, task: &ToyTask<T>) -> Result<(f64, Gradients<T>), TrainError> {
    let (g, loss) = record_loss(proj, task, true)?;
    let value = g.value(loss).data()[0].as_f64();
    Ok((value, g.backward(loss)?))
}

fn descend<T: Element>(params: &ParamStore<T>, grads: &Gradients<T>, lr: f64) -> ParamStore<T> {
    let lr = T::from_f64(lr);
    let mut next = ParamStore::new();
    for (name, p) in params.iter() {
        let updated = match grads.get(name) {
            Some(g) => Tensor::new(p.shape(), p.data().iter().zip(g.data()).map(|(&w, &d)| w - lr * d).collect())
                .expect("gradient shape matches parameter"),
            None => p.clone(),
        };
        next.insert(name, updated);
    }
    next
}

/// Runs `steps` descent steps starting from the projector initialized by `cfg`.
///
/// A trial update that increases the loss (or fails to evaluate) is reverted
/// and retried with half the step size; the halved size is kept for later
/// steps. Accepted losses are therefore non-increasing.
pub fn toy_train<T: Element>(
    cfg: &ProjectorConfig,
    task: &ToyTask<T>,
    steps: usize,
    lr: f64,
) -> Result<(TrainReport, Projector<T>), TrainError> {
    if steps == 0 {
        return Err(TrainError::NoSteps);
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(TrainError::BadLearningRate(lr));
    }
    if task.samples.is_empty() {
        return Err(TrainError::EmptyTask);
    }
    let mut proj = Projector::<T>::init(cfg)?;
    let mut lr = lr;
    let mut rejected = 0;
    let mut losses = Vec::with_capacity(steps + 1);

    for step in 0..steps {
        let (loss, grads) = match loss_and_grad(&proj, task) {
            Ok(v) => v,
            Err(TrainError::Tensor(TensorError::NonFinite { .. })) => return Err(TrainError::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(TrainError::Diverged { step });
        }
        if step == 0 {
            losses.push(loss);
        }
        let mut accepted = loss;
        for _ in 0..MAX_HALVINGS {
            let trial = Projector::with_params(cfg, descend(proj.params(), &grads, lr))?;
            match evaluate(&trial, task) {
                Ok(l) if l.is_finite() && l <= loss => {
                    proj = trial;
                    accepted = l;
                    break;
                }
                _ => {
                    rejected += 1;
                    lr *= 0.5;
                }
            }
        }
        losses.push(accepted);
    }
    Ok((
        TrainReport {
            losses,
            final_lr: lr,
            rejected,
        },
        proj,
    ))
}
