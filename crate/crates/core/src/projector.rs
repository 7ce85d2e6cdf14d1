//! Full projector: spatial branch (pyramid → conv group → detail fusion →
//! spatial MLP) in parallel with the patch branch (patch MLP), assembled
//! into the visual token sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{ConfigError, ProjectorConfig};
use crate::dfi::{self, DfiVars, DfiWeights, FusionResult};
use crate::element::Element;
use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::sfe::{self, ConvGroup, PatchGrid};
use crate::tensor::Tensor;

/// Pipeline stage an error originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input,
    Pyramid,
    Conv,
    Dfi,
    Mlp,
    Assembly,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::Pyramid => "pyramid",
            Stage::Conv => "conv",
            Stage::Dfi => "dfi",
            Stage::Mlp => "mlp",
            Stage::Assembly => "assembly",
        })
    }
}

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("parameters do not match config: {0}")]
    Params(String),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: TensorError,
    },
}

impl ProjectorError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            ProjectorError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

trait AtStage<V> {
    fn at(self, stage: Stage) -> Result<V, ProjectorError>;
}

impl<V> AtStage<V> for Result<V, TensorError> {
    fn at(self, stage: Stage) -> Result<V, ProjectorError> {
        self.map_err(|source| ProjectorError::Stage { stage, source })
    }
}

/// Two-layer MLP `fc2(GELU(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp<T: Element> {
    pub fc1: (Tensor<T>, Tensor<T>),
    pub fc2: (Tensor<T>, Tensor<T>),
}

pub const MLP_SPATIAL: &str = "mlp_s";
pub const MLP_PATCH: &str = "mlp_p";

fn mlp_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.fc1.weight"),
        format!("{prefix}.fc1.bias"),
        format!("{prefix}.fc2.weight"),
        format!("{prefix}.fc2.bias"),
    ]
}

impl<T: Element> Mlp<T> {
    pub fn param_specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
        let [w1, b1, w2, b2] = mlp_names(prefix);
        vec![
            ParamSpec::new(w1, &[input, output], Init::Uniform { fan_in: input }),
            ParamSpec::new(b1, &[output], Init::Uniform { fan_in: input }),
            ParamSpec::new(w2, &[output, output], Init::Uniform { fan_in: output }),
            ParamSpec::new(b2, &[output], Init::Uniform { fan_in: output }),
        ]
    }

    pub fn from_params(store: &ParamStore<T>, prefix: &str) -> Result<Self, TensorError> {
        let [w1, b1, w2, b2] = mlp_names(prefix);
        Ok(Self {
            fc1: (store.require(&w1)?.clone(), store.require(&b1)?.clone()),
            fc2: (store.require(&w2)?.clone(), store.require(&b2)?.clone()),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.0.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let h = ops::linear(x, &self.fc1.0, Some(&self.fc1.1))?;
        let h = ops::gelu(&h)?;
        ops::linear(&h, &self.fc2.0, Some(&self.fc2.1))
    }
}

fn record_mlp<T: Element>(g: &mut Graph<T>, x: Var, vars: &BTreeMap<String, Var>, prefix: &str) -> Result<Var, TensorError> {
    let [w1, b1, w2, b2] = mlp_names(prefix).map(|n| lookup(vars, &n));
    let h = g.linear(x, w1?, Some(b1?))?;
    let h = g.gelu(h)?;
    g.linear(h, w2?, Some(b2?))
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var, TensorError> {
    vars.get(name).copied().ok_or_else(|| TensorError::InvalidArgument {
        op: "params",
        detail: format!("missing parameter `{name}`"),
    })
}

fn check_mlp_input<T: Element>(x: &Tensor<T>, mlp: &Mlp<T>) -> Result<(), ProjectorError> {
    let (_, din) = x.dims2("mlp").at(Stage::Mlp)?;
    if din != mlp.input_dim() {
        return Err(ProjectorError::Stage {
            stage: Stage::Mlp,
            source: TensorError::ShapeMismatch {
                op: "mlp",
                detail: format!("input width {din}, MLP expects {}", mlp.input_dim()),
            },
        });
    }
    Ok(())
}

/// Spatial MLP over the fused (or, without fusion, the raw) spatial tokens.
pub fn project_spatial<T: Element>(zvs: &Tensor<T>, mlp_s: &Mlp<T>) -> Result<Tensor<T>, ProjectorError> {
    check_mlp_input(zvs, mlp_s)?;
    mlp_s.forward(zvs).at(Stage::Mlp)
}

/// Patch MLP over the `G²×C` flattened patch grid.
pub fn project_patch<T: Element>(zp_flat: &Tensor<T>, mlp_p: &Mlp<T>) -> Result<Tensor<T>, ProjectorError> {
    check_mlp_input(zp_flat, mlp_p)?;
    mlp_p.forward(zp_flat).at(Stage::Mlp)
}

/// Visual tokens (spatial then patch) followed by optional language tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T: Element> {
    pub spatial: Tensor<T>,
    pub patch: Tensor<T>,
    pub language: Option<Tensor<T>>,
}

impl<T: Element> TokenSequence<T> {
    pub fn spatial_len(&self) -> usize {
        self.spatial.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.patch.shape()[0]
    }

    pub fn language_len(&self) -> usize {
        self.language.as_ref().map_or(0, |l| l.shape()[0])
    }

    pub fn visual_len(&self) -> usize {
        self.spatial_len() + self.patch_len()
    }

    pub fn len(&self) -> usize {
        self.visual_len() + self.language_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All rows in sequence order as one `len×D` matrix.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut parts = vec![&self.spatial, &self.patch];
        parts.extend(self.language.as_ref());
        ops::concat(&parts, 0).expect("widths validated at assembly")
    }
}

/// Orders spatial → patch → language after checking every part has width `D`.
pub fn assemble_sequence<T: Element>(
    hvs: Tensor<T>,
    hvp: Tensor<T>,
    hq: Option<Tensor<T>>,
) -> Result<TokenSequence<T>, ProjectorError> {
    let (_, d) = hvs.dims2("assemble").at(Stage::Assembly)?;
    let mut parts = vec![&hvp];
    parts.extend(hq.as_ref());
    for p in parts {
        let (_, dp) = p.dims2("assemble").at(Stage::Assembly)?;
        if dp != d {
            return Err(ProjectorError::Stage {
                stage: Stage::Assembly,
                source: TensorError::ShapeMismatch {
                    op: "assemble",
                    detail: format!("embedding width {dp} differs from spatial width {d}"),
                },
            });
        }
    }
    Ok(TokenSequence {
        spatial: hvs,
        patch: hvp,
        language: hq,
    })
}

/// Graph handles produced by [`Projector::record`].
#[derive(Debug, Clone, Copy)]
pub struct RecordedForward {
    pub small: Var,
    pub big: Option<Var>,
    pub fused: Option<Var>,
    pub attn: Option<Var>,
    pub spatial: Var,
    pub patch: Var,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ProjectorOutput<T: Element> {
    pub sequence: TokenSequence<T>,
    /// Spatial tokens before fusion, one row per scale.
    pub small: Tensor<T>,
    /// Flattened big map and its side, when fusion is enabled.
    pub big: Option<(Tensor<T>, usize)>,
    pub fusion: Option<FusionResult<T>>,
}

/// Configuration plus a conforming parameter set.
#[derive(Debug, Clone)]
pub struct Projector<T: Element> {
    cfg: ProjectorConfig,
    params: ParamStore<T>,
}

impl<T: Element> Projector<T> {
    /// Every parameter the config needs, in a fixed order.
    pub fn param_specs(cfg: &ProjectorConfig) -> Vec<ParamSpec> {
        let sizes = cfg.scale_sizes();
        let mut specs = ConvGroup::<T>::param_specs(&sizes, cfg.enc_dim, cfg.spatial_dim, cfg.big_kernel, cfg.conv_bias);
        if !cfg.dfi_enabled {
            specs.retain(|s| s.name != sfe::BIG_WEIGHT && s.name != sfe::BIG_BIAS);
        } else {
            specs.extend(DfiWeights::<T>::param_specs(cfg.spatial_dim, cfg.qkv_bias));
        }
        specs.extend(Mlp::<T>::param_specs(MLP_SPATIAL, cfg.spatial_mlp_in(), cfg.llm_dim));
        specs.extend(Mlp::<T>::param_specs(MLP_PATCH, cfg.enc_dim, cfg.llm_dim));
        specs
    }

    /// Fresh parameters drawn from `cfg.seed`.
    pub fn init(cfg: &ProjectorConfig) -> Result<Self, ProjectorError> {
        cfg.validate()?;
        let params = ParamStore::init(&Self::param_specs(cfg), cfg.seed).at(Stage::Input)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn with_params(cfg: &ProjectorConfig, params: ParamStore<T>) -> Result<Self, ProjectorError> {
        cfg.validate()?;
        params
            .conforms_to(&Self::param_specs(cfg))
            .map_err(ProjectorError::Params)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn check_input(&self, zp: &PatchGrid<T>) -> Result<(), ProjectorError> {
        if zp.side() != self.cfg.grid || zp.channels() != self.cfg.enc_dim {
            return Err(ProjectorError::Stage {
                stage: Stage::Input,
                source: TensorError::ShapeMismatch {
                    op: "projector",
                    detail: format!(
                        "grid {}x{}x{} does not match config {}x{}x{}",
                        zp.side(),
                        zp.side(),
                        zp.channels(),
                        self.cfg.grid,
                        self.cfg.grid,
                        self.cfg.enc_dim
                    ),
                },
            });
        }
        Ok(())
    }

    /// Adds every parameter to `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BTreeMap<String, Var>, ProjectorError> {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(name, t.clone()).at(Stage::Input)?
                } else {
                    g.constant(t.clone())
                };
                Ok((name.to_string(), v))
            })
            .collect()
    }

    /// Spatial branch up to (and including) the spatial MLP.
    pub fn record_spatial(
        &self,
        g: &mut Graph<T>,
        zp: Var,
        vars: &BTreeMap<String, Var>,
    ) -> Result<(Var, Option<Var>, Option<Var>, Option<Var>, Var), ProjectorError> {
        let cfg = &self.cfg;
        let sizes = cfg.scale_sizes();
        let scales = sfe::record_pyramid(g, zp, cfg.variant, &sizes).at(Stage::Pyramid)?;
        let kernels = (0..sizes.len())
            .map(|j| {
                let w = lookup(vars, &sfe::scale_kernel_name(j))?;
                Ok((w, vars.get(&sfe::scale_bias_name(j)).copied()))
            })
            .collect::<Result<Vec<_>, TensorError>>()
            .at(Stage::Conv)?;
        let mut small = sfe::record_spatial_tokens(g, &scales, &sizes, &kernels).at(Stage::Conv)?;
        if cfg.conv_activation {
            small = g.gelu(small).at(Stage::Conv)?;
        }

        let (big, fused, attn, spatial_in) = if cfg.dfi_enabled {
            let bw = lookup(vars, sfe::BIG_WEIGHT).at(Stage::Conv)?;
            let mut big = sfe::record_big_map(g, zp, bw, vars.get(sfe::BIG_BIAS).copied()).at(Stage::Conv)?;
            if cfg.conv_activation {
                big = g.gelu(big).at(Stage::Conv)?;
            }
            let dv = dfi_vars(vars).at(Stage::Dfi)?;
            let (fused, attn) = dfi::record_dfi(g, small, big, &dv, cfg.norm_placement, cfg.ln_eps).at(Stage::Dfi)?;
            (Some(big), Some(fused), Some(attn), fused)
        } else {
            (None, None, None, small)
        };
        let spatial = record_mlp(g, spatial_in, vars, MLP_SPATIAL).at(Stage::Mlp)?;
        Ok((small, big, fused, attn, spatial))
    }

    /// Patch branch: flatten the grid and apply the patch MLP.
    pub fn record_patch(&self, g: &mut Graph<T>, zp: Var, vars: &BTreeMap<String, Var>) -> Result<Var, ProjectorError> {
        let n = self.cfg.patch_count();
        let flat = g.reshape(zp, &[n, self.cfg.enc_dim]).at(Stage::Input)?;
        record_mlp(g, flat, vars, MLP_PATCH).at(Stage::Mlp)
    }

    /// Records the whole forward pass on `g` with parameters bound from `vars`.
    pub fn record(
        &self,
        g: &mut Graph<T>,
        zp: &PatchGrid<T>,
        vars: &BTreeMap<String, Var>,
    ) -> Result<RecordedForward, ProjectorError> {
        self.check_input(zp)?;
        let zv = g.constant(zp.tensor().clone());
        let (small, big, fused, attn, spatial) = self.record_spatial(g, zv, vars)?;
        let patch = self.record_patch(g, zv, vars)?;
        Ok(RecordedForward {
            small,
            big,
            fused,
            attn,
            spatial,
            patch,
        })
    }

    /// Inference forward pass.
    pub fn forward(&self, zp: &PatchGrid<T>) -> Result<ProjectorOutput<T>, ProjectorError> {
        self.forward_timed(zp).map(|(out, _)| out)
    }

    /// Forward pass that also reports how long each branch took.
    pub fn forward_timed(&self, zp: &PatchGrid<T>) -> Result<(ProjectorOutput<T>, BranchTimes), ProjectorError> {
        let start = Instant::now();
        self.check_input(zp)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let zv = g.constant(zp.tensor().clone());
        let t0 = Instant::now();
        let (small, big, fused, attn, spatial) = self.record_spatial(&mut g, zv, &vars)?;
        let t1 = Instant::now();
        let patch = self.record_patch(&mut g, zv, &vars)?;
        let t2 = Instant::now();

        let big = big.map(|b| (g.value(b).clone(), self.cfg.big_side()));
        let fusion = match (fused, attn) {
            (Some(f), Some(a)) => Some(FusionResult {
                fused: g.value(f).clone(),
                attn: g.value(a).clone(),
            }),
            _ => None,
        };
        let sequence = assemble_sequence(g.value(spatial).clone(), g.value(patch).clone(), None)?;
        let out = ProjectorOutput {
            sequence,
            small: g.value(small).clone(),
            big,
            fusion,
        };
        let times = BranchTimes {
            spatial: t1 - t0,
            patch: t2 - t1,
            total: start.elapsed(),
        };
        Ok((out, times))
    }
}

/// Wall time of one forward pass, split by branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchTimes {
    pub spatial: Duration,
    pub patch: Duration,
    pub total: Duration,
}

fn dfi_vars(vars: &BTreeMap<String, Var>) -> Result<DfiVars, TensorError> {
    let opt = |n: &str| vars.get(n).copied();
    Ok(DfiVars {
        norm_q: (lookup(vars, dfi::NORM_Q_GAMMA)?, lookup(vars, dfi::NORM_Q_BETA)?),
        norm_kv: (lookup(vars, dfi::NORM_KV_GAMMA)?, lookup(vars, dfi::NORM_KV_BETA)?),
        q: (lookup(vars, dfi::Q_WEIGHT)?, opt(dfi::Q_BIAS)),
        k: (lookup(vars, dfi::K_WEIGHT)?, opt(dfi::K_BIAS)),
        v: (lookup(vars, dfi::V_WEIGHT)?, opt(dfi::V_BIAS)),
    })
}

/// Runs the projector for `cfg` with explicit parameters.
pub fn projector_forward<T: Element>(
    cfg: &ProjectorConfig,
    zp: &PatchGrid<T>,
    params: &ParamStore<T>,
) -> Result<ProjectorOutput<T>, ProjectorError> {
    Projector::with_params(cfg, params.clone())?.forward(zp)
}

/// Coarse grouping of parameter names used in reports.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("sfe.big") {
        "big_kernel"
    } else if name.starts_with("sfe.conv") {
        "conv_group"
    } else if name.starts_with("dfi") {
        "dfi"
    } else if name.starts_with(MLP_SPATIAL) {
        "mlp_spatial"
    } else if name.starts_with(MLP_PATCH) {
        "mlp_patch"
    } else {
        "other"
    }
}
