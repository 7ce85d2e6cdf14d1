//! Detail feature integration: single-head cross-attention from the spatial
//! tokens (queries) onto the big map (keys/values), channel-concatenated
//! with the untouched spatial tokens.

use std::fmt::Write as _;

use crate::config::NormPlacement;
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const NORM_Q_GAMMA: &str = "dfi.norm_q.gamma";
pub const NORM_Q_BETA: &str = "dfi.norm_q.beta";
pub const NORM_KV_GAMMA: &str = "dfi.norm_kv.gamma";
pub const NORM_KV_BETA: &str = "dfi.norm_kv.beta";
pub const Q_WEIGHT: &str = "dfi.q.weight";
pub const Q_BIAS: &str = "dfi.q.bias";
pub const K_WEIGHT: &str = "dfi.k.weight";
pub const K_BIAS: &str = "dfi.k.bias";
pub const V_WEIGHT: &str = "dfi.v.weight";
pub const V_BIAS: &str = "dfi.v.bias";

/// Query/key/value maps with their layer norms.
///
/// `norm_q` normalizes the query path, `norm_kv` is shared by keys and values.
#[derive(Debug, Clone)]
pub struct DfiWeights<T: Element> {
    pub norm_q: (Tensor<T>, Tensor<T>),
    pub norm_kv: (Tensor<T>, Tensor<T>),
    pub q: (Tensor<T>, Option<Tensor<T>>),
    pub k: (Tensor<T>, Option<Tensor<T>>),
    pub v: (Tensor<T>, Option<Tensor<T>>),
    pub placement: NormPlacement,
    pub eps: f64,
}

impl<T: Element> DfiWeights<T> {
    pub fn param_specs(dim: usize, bias: bool) -> Vec<ParamSpec> {
        let mut specs = vec![
            ParamSpec::new(NORM_Q_GAMMA, &[dim], Init::Ones),
            ParamSpec::new(NORM_Q_BETA, &[dim], Init::Zeros),
            ParamSpec::new(NORM_KV_GAMMA, &[dim], Init::Ones),
            ParamSpec::new(NORM_KV_BETA, &[dim], Init::Zeros),
        ];
        for (w, b) in [(Q_WEIGHT, Q_BIAS), (K_WEIGHT, K_BIAS), (V_WEIGHT, V_BIAS)] {
            specs.push(ParamSpec::new(w, &[dim, dim], Init::Uniform { fan_in: dim }));
            if bias {
                specs.push(ParamSpec::new(b, &[dim], Init::Uniform { fan_in: dim }));
            }
        }
        specs
    }

    pub fn from_params(store: &ParamStore<T>, placement: NormPlacement, eps: f64) -> Result<Self> {
        let pair = |w: &str, b: &str| -> Result<(Tensor<T>, Option<Tensor<T>>)> {
            Ok((store.require(w)?.clone(), store.get(b).cloned()))
        };
        Ok(Self {
            norm_q: (store.require(NORM_Q_GAMMA)?.clone(), store.require(NORM_Q_BETA)?.clone()),
            norm_kv: (store.require(NORM_KV_GAMMA)?.clone(), store.require(NORM_KV_BETA)?.clone()),
            q: pair(Q_WEIGHT, Q_BIAS)?,
            k: pair(K_WEIGHT, K_BIAS)?,
            v: pair(V_WEIGHT, V_BIAS)?,
            placement,
            eps,
        })
    }

    /// Unit norms, the given maps and no biases.
    pub fn from_maps(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        let dim = q.shape()[0];
        for m in [&q, &k, &v] {
            if m.shape() != [dim, dim] {
                return Err(TensorError::shape("dfi", format!("maps must be {dim}x{dim}, got {:?}", m.shape())));
            }
        }
        let norm = || -> Result<(Tensor<T>, Tensor<T>)> { Ok((Tensor::ones(&[dim])?, Tensor::zeros(&[dim])?)) };
        Ok(Self {
            norm_q: norm()?,
            norm_kv: norm()?,
            q: (q, None),
            k: (k, None),
            v: (v, None),
            placement: NormPlacement::Pre,
            eps: 1e-5,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.0.shape()[0]
    }

    fn record_params(&self, g: &mut Graph<T>) -> DfiVars {
        let mut c = |t: &Tensor<T>| g.constant(t.clone());
        let norm_q = (c(&self.norm_q.0), c(&self.norm_q.1));
        let norm_kv = (c(&self.norm_kv.0), c(&self.norm_kv.1));
        let q = (c(&self.q.0), self.q.1.as_ref().map(&mut c));
        let k = (c(&self.k.0), self.k.1.as_ref().map(&mut c));
        let v = (c(&self.v.0), self.v.1.as_ref().map(&mut c));
        DfiVars {
            norm_q,
            norm_kv,
            q,
            k,
            v,
        }
    }
}

/// Graph handles of [`DfiWeights`].
#[derive(Debug, Clone, Copy)]
pub struct DfiVars {
    pub norm_q: (Var, Var),
    pub norm_kv: (Var, Var),
    pub q: (Var, Option<Var>),
    pub k: (Var, Option<Var>),
    pub v: (Var, Option<Var>),
}

/// Fused tokens `[small | attn·V]` and the attention weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult<T: Element> {
    pub fused: Tensor<T>,
    pub attn: Tensor<T>,
}

/// Records the fusion; returns `(fused, attn)`.
pub fn record_dfi<T: Element>(
    g: &mut Graph<T>,
    small: Var,
    big: Var,
    w: &DfiVars,
    placement: NormPlacement,
    eps: f64,
) -> Result<(Var, Var)> {
    const OP: &str = "dfi_fuse";
    let (n, cs) = g.value(small).dims2(OP)?;
    let (m, cb) = g.value(big).dims2(OP)?;
    if n == 0 || m == 0 || cs != cb {
        return Err(TensorError::shape(
            OP,
            format!("small {:?} and big {:?} must share the channel width", g.value(small).shape(), g.value(big).shape()),
        ));
    }
    let project = |g: &mut Graph<T>, x: Var, norm: (Var, Var), map: (Var, Option<Var>)| -> Result<Var> {
        match placement {
            NormPlacement::Pre => {
                let h = g.layer_norm(x, norm.0, norm.1, eps)?;
                g.linear(h, map.0, map.1)
            }
            NormPlacement::Post => {
                let h = g.linear(x, map.0, map.1)?;
                g.layer_norm(h, norm.0, norm.1, eps)
            }
        }
    };
    let q = project(g, small, w.norm_q, w.q)?;
    let (k, v) = match placement {
        NormPlacement::Pre => {
            // keys and values share one normalized copy of the big map
            let h = g.layer_norm(big, w.norm_kv.0, w.norm_kv.1, eps)?;
            (g.linear(h, w.k.0, w.k.1)?, g.linear(h, w.v.0, w.v.1)?)
        }
        NormPlacement::Post => (project(g, big, w.norm_kv, w.k)?, project(g, big, w.norm_kv, w.v)?),
    };
    let d_k = g.value(q).shape()[1];
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let attn = g.softmax_rows(scaled)?;
    let attended = g.matmul(attn, v)?;
    let fused = g.concat(&[small, attended], 1)?;
    Ok((fused, attn))
}

/// `fused = [small | softmax(Q Kᵀ/√d_k) V]` with `Q`, `K`, `V` from normalized linear maps.
pub fn dfi_fuse<T: Element>(small: &Tensor<T>, big: &Tensor<T>, w: &DfiWeights<T>) -> Result<FusionResult<T>> {
    let mut g = Graph::new();
    let vars = w.record_params(&mut g);
    let s = g.constant(small.clone());
    let b = g.constant(big.clone());
    let (fused, attn) = record_dfi(&mut g, s, b, &vars, w.placement, w.eps)?;
    Ok(FusionResult {
        fused: g.value(fused).clone(),
        attn: g.value(attn).clone(),
    })
}

/// Attention weights labelled for export: rows are queries, columns keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T: Element> {
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    pub weights: Tensor<T>,
}

pub fn export_attention<T: Element>(result: &FusionResult<T>) -> AttentionMap<T> {
    let (n, m) = (result.attn.shape()[0], result.attn.shape()[1]);
    AttentionMap {
        query_labels: (1..=n).map(|i| format!("q{i}")).collect(),
        key_labels: (1..=m).map(|j| format!("k{j}")).collect(),
        weights: result.attn.clone(),
    }
}

impl<T: Element> AttentionMap<T> {
    pub fn rows(&self) -> usize {
        self.query_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.key_labels.len()
    }

    pub fn get(&self, query: usize, key: usize) -> T {
        self.weights.data()[query * self.cols() + key]
    }

    /// Header `query,k1..km`, then one `qi,...` row per query.
    /// Values use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for k in &self.key_labels {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for (label, row) in self.query_labels.iter().zip(self.weights.data().chunks(self.cols())) {
            out.push_str(label);
            for v in row {
                write!(out, ",{v}").expect("writing to String");
            }
            out.push('\n');
        }
        out
    }
}
