//! Runtime invariant suite: every structural property the projector promises,
//! checked on freshly drawn data and reported one line per check.
//!
//! Accounting checks use the given config as is. Numeric checks that need a
//! full forward or backward pass run at desk dimensions (see
//! [`ProjectorConfig::desk`]) while keeping the config's variant and flags, so
//! the suite stays fast for any config.

use std::fmt;

use rand::Rng;

use crate::bench::prefill_ratio;
use crate::config::{self, ProjectorConfig, Variant};
use crate::dfi::{self, DfiWeights};
use crate::error::Result as TResult;
use crate::gradcheck::{self, GradCheckOptions};
use crate::ops;
use crate::projector::Projector;
use crate::reference;
use crate::rng;
use crate::sfe::{self, ConvGroup, PatchGrid};
use crate::synth::{gen_synthetic_features, SynthKind};
use crate::tensor::Tensor;
use crate::train::{toy_train, ToyTask};
use crate::vspf;

pub type PoolFn = fn(&Tensor<f64>, usize) -> TResult<Tensor<f64>>;

pub const FORWARD_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random instances per operator oracle.
    pub oracle_cases: usize,
    /// Coordinates probed per parameter by gradient checks (`None`: all).
    pub grad_coords: Option<usize>,
    pub train_steps: usize,
    pub train_lr: f64,
    /// Pooling implementation checked against the reference. Only the pooling
    /// oracle uses it; everything else goes through [`ops`].
    pub pool: PoolFn,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            oracle_cases: 50,
            grad_coords: Some(16),
            train_steps: 200,
            train_lr: 0.5,
            pool: ops::adaptive_avg_pool2d::<f64>,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// `name<TAB>PASS|FAIL<TAB>metric`, one line per check.
impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{}\t{status}\t{:.6e}", c.name, c.metric)?;
        }
        Ok(())
    }
}

struct Runner {
    report: SuiteReport,
}

impl Runner {
    /// Records a check whose metric must not exceed `limit`.
    fn at_most(&mut self, name: &'static str, metric: TResult<f64, String>, limit: f64) {
        let (passed, metric) = match metric {
            Ok(m) => (m <= limit, m),
            Err(_) => (false, f64::NAN),
        };
        self.report.checks.push(Check { name, passed, metric });
    }

    /// Records a yes/no check; the metric is the observed value.
    fn holds(&mut self, name: &'static str, outcome: TResult<(bool, f64), String>) {
        let (passed, metric) = outcome.unwrap_or((false, f64::NAN));
        self.report.checks.push(Check { name, passed, metric });
    }
}

fn s<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Desk dimensions with the flags of `cfg`.
pub fn numeric_config(cfg: &ProjectorConfig) -> ProjectorConfig {
    ProjectorConfig {
        variant: cfg.variant,
        dfi_enabled: cfg.dfi_enabled,
        conv_bias: cfg.conv_bias,
        conv_activation: cfg.conv_activation,
        qkv_bias: cfg.qkv_bias,
        norm_placement: cfg.norm_placement,
        ln_eps: cfg.ln_eps,
        seed: cfg.seed,
        ..ProjectorConfig::desk()
    }
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    rng::normal(shape, rng).expect("non-empty shape")
}

fn grid(g: usize, c: usize, seed: u64) -> PatchGrid<f64> {
    gen_synthetic_features(SynthKind::Noise, g, c, seed).expect("non-empty grid")
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_rel_diff(b).unwrap_or(f64::INFINITY)
}

pub fn run_invariant_suite(cfg: &ProjectorConfig, opts: &SuiteOptions) -> SuiteReport {
    let mut r = Runner {
        report: SuiteReport::default(),
    };
    if cfg.validate().is_err() {
        r.holds("config_valid", Ok((false, 0.0)));
        return r.report;
    }
    r.holds("config_valid", Ok((true, 1.0)));
    let desk = numeric_config(cfg);

    tensor_checks(&mut r, cfg, &desk, opts);
    sfe_checks(&mut r, cfg, &desk, opts);
    dfi_checks(&mut r, &desk, opts);
    projector_checks(&mut r, cfg, &desk, opts);
    harness_checks(&mut r, &desk, opts);
    r.report
}

fn tensor_checks(r: &mut Runner, cfg: &ProjectorConfig, desk: &ProjectorConfig, opts: &SuiteOptions) {
    let cases = opts.oracle_cases;

    let mut rng = rng::stream(opts.seed, "suite.conv");
    r.at_most(
        "conv2d_oracle",
        (0..cases).try_fold(0.0f64, |worst, _| {
            let (k, stride, out_h, out_w) = (
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let h = (out_h - 1) * stride + k;
            let w = (out_w - 1) * stride + k;
            let x = normal(&[h, w, cin], &mut rng);
            let kern = normal(&[k, k, cin, cout], &mut rng);
            let b = normal(&[cout], &mut rng);
            let got = ops::conv2d_valid(&x, &kern, Some(&b), stride).map_err(s)?;
            Ok(worst.max(max_rel(&got, &reference::conv2d(&x, &kern, Some(&b), stride))))
        }),
        FORWARD_TOL,
    );

    let mut rng = rng::stream(opts.seed, "suite.pool");
    r.at_most(
        "pool_oracle",
        (0..cases).try_fold(0.0f64, |worst, _| {
            let h = rng.random_range(1..=10);
            let out = rng.random_range(1..=h);
            let x = normal(&[h, h, rng.random_range(1..=3)], &mut rng);
            let got = (opts.pool)(&x, out).map_err(s)?;
            Ok(worst.max(max_rel(&got, &reference::adaptive_avg_pool2d(&x, out))))
        }),
        FORWARD_TOL,
    );

    let mut rng = rng::stream(opts.seed, "suite.crop");
    r.at_most(
        "center_crop_oracle",
        (0..cases).try_fold(0.0f64, |worst, _| {
            let size = rng.random_range(1..=6);
            let h = size + 2 * rng.random_range(0..=3);
            let x = normal(&[h, h, rng.random_range(1..=3)], &mut rng);
            let got = ops::center_crop(&x, size).map_err(s)?;
            Ok(worst.max(max_rel(&got, &reference::center_crop(&x, size))))
        }),
        FORWARD_TOL,
    );

    let mut rng = rng::stream(opts.seed, "suite.linear");
    r.at_most(
        "linear_oracle",
        (0..cases).try_fold(0.0f64, |worst, _| {
            let (n, din, dout) = (rng.random_range(1..=6), rng.random_range(1..=8), rng.random_range(1..=6));
            let x = normal(&[n, din], &mut rng);
            let w = normal(&[din, dout], &mut rng);
            let b = normal(&[dout], &mut rng);
            let got = ops::linear(&x, &w, Some(&b)).map_err(s)?;
            Ok(worst.max(max_rel(&got, &reference::linear(&x, &w, Some(&b)))))
        }),
        FORWARD_TOL,
    );

    let mut rng = rng::stream(opts.seed, "suite.layer_norm");
    r.at_most(
        "layer_norm_oracle",
        (0..cases).try_fold(0.0f64, |worst, _| {
            let (n, d) = (rng.random_range(1..=4), rng.random_range(2..=9));
            let x = normal(&[n, d], &mut rng);
            let gamma = normal(&[d], &mut rng);
            let beta = normal(&[d], &mut rng);
            let got = ops::layer_norm(&x, &gamma, &beta, 1e-5).map_err(s)?;
            Ok(worst.max(max_rel(&got, &reference::layer_norm(&x, &gamma, &beta, 1e-5))))
        }),
        FORWARD_TOL,
    );

    let mut rng = rng::stream(opts.seed, "suite.softmax");
    r.at_most(
        "softmax_rows",
        (0..cases).try_fold(0.0f64, |worst, _| {
            let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=25));
            let x = normal(&[n, m], &mut rng).map(|v| 5.0 * v);
            let y = ops::softmax_rows(&x).map_err(s)?;
            let shift: f64 = rng.random_range(-50.0..50.0);
            let shifted = ops::softmax_rows(&x.map(|v| v + shift)).map_err(s)?;
            let sums = y
                .data()
                .chunks(m)
                .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            Ok(worst
                .max(sums)
                .max(max_rel(&y, &shifted))
                .max(max_rel(&y, &reference::softmax_rows(&x))))
        }),
        FORWARD_TOL,
    );

    let mut rng = rng::stream(opts.seed, "suite.gelu");
    r.at_most(
        "gelu_oracle",
        (|| {
            let x = normal(&[cases.max(1), 4], &mut rng).map(|v| 3.0 * v);
            Ok(max_rel(&ops::gelu(&x).map_err(s)?, &reference::gelu(&x)))
        })(),
        FORWARD_TOL,
    );

    // pyramid laws on the config's own grid, with few channels
    let zp = grid(cfg.grid, 2, opts.seed);
    let sizes = cfg.scale_sizes();
    r.holds(
        "crop_projection",
        (|| {
            for (i, &b) in sizes.iter().enumerate() {
                for &a in &sizes[i..] {
                    let twice = ops::center_crop(&ops::center_crop(zp.tensor(), a).map_err(s)?, b).map_err(s)?;
                    if !twice.bit_eq(&ops::center_crop(zp.tensor(), b).map_err(s)?) {
                        return Ok((false, a as f64));
                    }
                }
            }
            Ok((true, sizes.len() as f64))
        })(),
    );

    r.at_most(
        "pool_identity",
        (|| {
            let c = zp.channels();
            let same = ops::adaptive_avg_pool2d(zp.tensor(), cfg.grid).map_err(s)?;
            if !same.bit_eq(zp.tensor()) {
                return Ok(f64::INFINITY);
            }
            let global = ops::adaptive_avg_pool2d(zp.tensor(), 1).map_err(s)?;
            let n = (cfg.grid * cfg.grid) as f64;
            let mean = Tensor::from_fn(&[1, 1, c], |ch| zp.tensor().data().iter().skip(ch).step_by(c).sum::<f64>() / n)
                .map_err(s)?;
            Ok(max_rel(&global, &mean))
        })(),
        FORWARD_TOL,
    );

    let zp = grid(desk.grid, desk.enc_dim, opts.seed);
    r.holds(
        "forward_determinism",
        (|| {
            let a = Projector::<f64>::init(desk).map_err(s)?.forward(&zp).map_err(s)?;
            let b = Projector::<f64>::init(desk).map_err(s)?.forward(&zp).map_err(s)?;
            let same = a.sequence.to_tensor().bit_eq(&b.sequence.to_tensor());
            Ok((same, a.sequence.len() as f64))
        })(),
    );
}

fn sfe_checks(r: &mut Runner, cfg: &ProjectorConfig, desk: &ProjectorConfig, opts: &SuiteOptions) {
    // count of j >= 0 with G - 2·stride·j > 0
    let expected = cfg.grid.div_ceil(2 * cfg.crop_stride);
    let sizes = cfg.scale_sizes();
    let ordered = sizes.windows(2).all(|w| w[0] < w[1]) && sizes.last() == Some(&cfg.grid);
    r.holds("scale_count", Ok((sizes.len() == expected && ordered, sizes.len() as f64)));

    let table = [(1, 12), (2, 6), (4, 3), (24, 1)]
        .iter()
        .all(|&(stride, n)| config::scale_sizes(24, stride).len() == n)
        && config::scale_sizes(24, 2) == [4, 8, 12, 16, 20, 24]
        && config::scale_sizes(24, 4) == [8, 16, 24]
        && config::scale_sizes(24, 1) == (1..=12).map(|i| 2 * i).collect::<Vec<_>>();
    r.holds("scale_schedule_table", Ok((table, 3.0)));

    let big_ok = [(4, 121), (8, 81), (12, 49), (16, 25), (24, 1)]
        .iter()
        .all(|&(k, m)| config::big_side(24, k).pow(2) == m);
    let side = cfg.big_side();
    r.holds(
        "big_map_size",
        Ok((big_ok && side == (cfg.grid - cfg.big_kernel) / 2 + 1, (side * side) as f64)),
    );

    let zp = grid(cfg.grid, 2, opts.seed ^ 1);
    r.holds(
        "crop_nesting",
        (|| {
            let pyr = sfe::build_crop_pyramid(&zp, cfg.crop_stride).map_err(s)?;
            for j in 0..pyr.len() {
                for i in 0..j {
                    let nested = ops::center_crop(&pyr.scales[j], pyr.sizes[i]).map_err(s)?;
                    if !nested.bit_eq(&pyr.scales[i]) {
                        return Ok((false, i as f64));
                    }
                }
            }
            Ok((true, pyr.len() as f64))
        })(),
    );

    r.holds(
        "pool_last_scale_identity",
        (|| {
            let pyr = sfe::build_pool_pyramid(&zp, cfg.crop_stride).map_err(s)?;
            let last = pyr.scales.last().ok_or("empty pyramid")?;
            Ok((last.bit_eq(zp.tensor()), pyr.len() as f64))
        })(),
    );

    let zp = grid(desk.grid, desk.enc_dim, opts.seed ^ 2);
    r.holds(
        "variant_shapes",
        (|| {
            let mut shapes = Vec::new();
            for v in Variant::ALL {
                let out = Projector::<f64>::init(&desk.clone().with_variant(v))
                    .map_err(s)?
                    .forward(&zp)
                    .map_err(s)?;
                let mut stage = vec![out.small.shape().to_vec(), out.sequence.to_tensor().shape().to_vec()];
                if let Some(f) = &out.fusion {
                    stage.push(f.fused.shape().to_vec());
                    stage.push(f.attn.shape().to_vec());
                }
                shapes.push(stage);
            }
            Ok((shapes[0] == shapes[1], shapes[0].len() as f64))
        })(),
    );

    r.holds(
        "last_token_shared",
        (|| {
            let sizes = desk.scale_sizes();
            let params = Projector::<f64>::init(desk).map_err(s)?.into_params();
            let group = ConvGroup::from_params(&params, sizes.len()).map_err(s)?;
            let crop = sfe::build_crop_pyramid(&zp, desk.crop_stride).map_err(s)?;
            let pool = sfe::build_pool_pyramid(&zp, desk.crop_stride).map_err(s)?;
            let a = sfe::extract_spatial_tokens(&crop, &group).map_err(s)?;
            let b = sfe::extract_spatial_tokens(&pool, &group).map_err(s)?;
            let n = sizes.len();
            let c = desk.spatial_dim;
            let last = |t: &Tensor<f64>| t.data()[(n - 1) * c..].to_vec();
            Ok((last(&a) == last(&b), n as f64))
        })(),
    );

    let mut rng = rng::stream(opts.seed, "suite.permutation");
    r.at_most(
        "full_cover_permutation",
        (|| {
            let (side, cin, cout) = (desk.grid, desk.enc_dim, desk.spatial_dim);
            let per_position = normal(&[cin, cout], &mut rng);
            let kernel = Tensor::from_fn(&[side, side, cin, cout], |i| per_position.data()[i % (cin * cout)]).map_err(s)?;
            let x = normal(&[side, side, cin], &mut rng);
            let mut order: Vec<usize> = (0..side * side).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let shuffled = Tensor::from_fn(&[side, side, cin], |i| {
                let (pos, ch) = (i / cin, i % cin);
                x.data()[order[pos] * cin + ch]
            })
            .map_err(s)?;
            let a = ops::conv2d_valid(&x, &kernel, None, side).map_err(s)?;
            let b = ops::conv2d_valid(&shuffled, &kernel, None, side).map_err(s)?;
            Ok(max_rel(&a, &b))
        })(),
        FORWARD_TOL,
    );
}

fn dfi_checks(r: &mut Runner, desk: &ProjectorConfig, opts: &SuiteOptions) {
    let c = desk.spatial_dim;
    let mut rng = rng::stream(opts.seed, "suite.dfi");
    let specs = DfiWeights::<f64>::param_specs(c, desk.qkv_bias);
    let store = crate::params::ParamStore::init(&specs, opts.seed).expect("dfi params");
    let weights = DfiWeights::from_params(&store, desk.norm_placement, desk.ln_eps).expect("dfi params");
    let n = desk.scale_count();
    let m = desk.big_side().pow(2);
    let small = normal(&[n, c], &mut rng);
    let big = normal(&[m, c], &mut rng);
    let fused = dfi::dfi_fuse(&small, &big, &weights);

    r.holds(
        "dfi_passthrough",
        fused.as_ref().map_err(s).map(|f| {
            let same = f.fused.data().chunks(2 * c).zip(small.data().chunks(c)).all(|(row, src)| {
                row[..c]
                    .iter()
                    .zip(src)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            });
            (same, n as f64)
        }),
    );

    r.at_most(
        "dfi_attention_rows",
        fused.as_ref().map_err(s).map(|f| {
            let in_range = f.attn.data().iter().all(|v| (0.0..=1.0).contains(v));
            let dev = f
                .attn
                .data()
                .chunks(m)
                .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            if in_range {
                dev
            } else {
                f64::INFINITY
            }
        }),
        FORWARD_TOL,
    );

    r.holds(
        "dfi_convexity",
        (|| {
            let f = fused.as_ref().map_err(s)?;
            let mut g = crate::graph::Graph::<f64>::new();
            let b = g.constant(big.clone());
            let (gamma, beta) = (&weights.norm_kv.0, &weights.norm_kv.1);
            let (gamma, beta) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let w = g.constant(weights.v.0.clone());
            let bias = weights.v.1.clone().map(|t| g.constant(t));
            let v = match desk.norm_placement {
                config::NormPlacement::Pre => {
                    let h = g.layer_norm(b, gamma, beta, desk.ln_eps).map_err(s)?;
                    g.linear(h, w, bias).map_err(s)?
                }
                config::NormPlacement::Post => {
                    let h = g.linear(b, w, bias).map_err(s)?;
                    g.layer_norm(h, gamma, beta, desk.ln_eps).map_err(s)?
                }
            };
            let v = g.value(v);
            let mut worst = 0.0f64;
            for row in f.fused.data().chunks(2 * c) {
                for (col, &out) in row[c..].iter().enumerate() {
                    let column = v.data().iter().skip(col).step_by(c);
                    let lo = column.clone().cloned().fold(f64::INFINITY, f64::min);
                    let hi = column.cloned().fold(f64::NEG_INFINITY, f64::max);
                    worst = worst.max(lo - out).max(out - hi);
                }
            }
            Ok((worst <= 1e-12, worst.max(0.0)))
        })(),
    );

    r.at_most(
        "dfi_identical_keys",
        (|| {
            let row = normal(&[1, c], &mut rng);
            let same = Tensor::from_fn(&[m, c], |i| row.data()[i % c]).map_err(s)?;
            let f = dfi::dfi_fuse(&small, &same, &weights).map_err(s)?;
            Ok(f.attn.data().iter().map(|v| (v - 1.0 / m as f64).abs()).fold(0.0, f64::max))
        })(),
        FORWARD_TOL,
    );

    r.at_most(
        "dfi_single_key",
        (|| {
            let one = normal(&[1, c], &mut rng);
            let f = dfi::dfi_fuse(&small, &one, &weights).map_err(s)?;
            Ok(f.attn.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max))
        })(),
        FORWARD_TOL,
    );

    r.holds(
        "dfi_token_count",
        fused.as_ref().map_err(s).map(|f| (f.fused.shape() == [n, 2 * c], f.fused.shape()[0] as f64)),
    );

    r.at_most(
        "gradcheck_dfi",
        (|| {
            let report = gradcheck::check_graph(
                &store,
                |g, p, trainable| -> TResult<_, String> {
                    let mut vars = std::collections::BTreeMap::new();
                    for (name, t) in p.iter() {
                        let v = if trainable {
                            g.param(name, t.clone()).map_err(s)?
                        } else {
                            g.constant(t.clone())
                        };
                        vars.insert(name.to_string(), v);
                    }
                    let get = |n: &str| vars.get(n).copied();
                    let dv = dfi::DfiVars {
                        norm_q: (vars[dfi::NORM_Q_GAMMA], vars[dfi::NORM_Q_BETA]),
                        norm_kv: (vars[dfi::NORM_KV_GAMMA], vars[dfi::NORM_KV_BETA]),
                        q: (vars[dfi::Q_WEIGHT], get(dfi::Q_BIAS)),
                        k: (vars[dfi::K_WEIGHT], get(dfi::K_BIAS)),
                        v: (vars[dfi::V_WEIGHT], get(dfi::V_BIAS)),
                    };
                    let sv = g.constant(small.clone());
                    let bv = g.constant(big.clone());
                    let (f, _) = dfi::record_dfi(g, sv, bv, &dv, desk.norm_placement, desk.ln_eps).map_err(s)?;
                    let sq = g.mul(f, f).map_err(s)?;
                    g.mean(sq).map_err(s)
                },
                GradCheckOptions {
                    max_coords: opts.grad_coords,
                    seed: opts.seed,
                    ..Default::default()
                },
            )
            .map_err(s)?;
            Ok(report.max_rel_error())
        })(),
        GRAD_TOL,
    );
}

fn projector_checks(r: &mut Runner, cfg: &ProjectorConfig, desk: &ProjectorConfig, opts: &SuiteOptions) {
    let n = cfg.visual_token_count();
    r.holds(
        "token_accounting",
        Ok((n == cfg.scale_sizes().len() + cfg.grid * cfg.grid, n as f64)),
    );

    let published = ProjectorConfig::full_scale();
    let at_stride = |stride| ProjectorConfig {
        crop_stride: stride,
        ..published.clone()
    };
    let table = published.visual_token_count() == 582
        && at_stride(1).visual_token_count() == 588
        && at_stride(4).visual_token_count() == 579;
    r.holds("token_accounting_table", Ok((table, published.visual_token_count() as f64)));

    let ratio = prefill_ratio(582, 576, published.llm_dim, 32);
    r.holds(
        "prefill_ratio",
        Ok((
            (ratio.linear - 582.0 / 576.0).abs() < 1e-12 && ratio.quadratic <= (582.0f64 / 576.0).powi(2) + 1e-12,
            ratio.linear,
        )),
    );

    let zp = grid(desk.grid, desk.enc_dim, opts.seed ^ 3);
    r.holds(
        "patch_branch_dfi_independent",
        (|| {
            let on = ProjectorConfig {
                dfi_enabled: true,
                ..desk.clone()
            };
            let off = ProjectorConfig {
                dfi_enabled: false,
                ..desk.clone()
            };
            let a = Projector::<f64>::init(&on).map_err(s)?.forward(&zp).map_err(s)?;
            let b = Projector::<f64>::init(&off).map_err(s)?.forward(&zp).map_err(s)?;
            let same = a.sequence.patch.bit_eq(&b.sequence.patch);
            let spatial_in = (a.sequence.spatial.shape() == b.sequence.spatial.shape()) as u8;
            Ok((same, spatial_in as f64))
        })(),
    );

    for (name, dfi_enabled) in [("gradcheck_projector_dfi", true), ("gradcheck_projector_no_dfi", false)] {
        let cfg = ProjectorConfig {
            dfi_enabled,
            ..desk.clone()
        };
        r.at_most(
            name,
            (|| {
                let proj = Projector::<f64>::init(&cfg).map_err(s)?;
                let mut rng = rng::stream(opts.seed, name);
                let target = normal(&[cfg.visual_token_count(), cfg.llm_dim], &mut rng);
                let report = gradcheck::check_projector(
                    &proj,
                    &zp,
                    &target,
                    GradCheckOptions {
                        max_coords: opts.grad_coords,
                        seed: opts.seed,
                        ..Default::default()
                    },
                )
                .map_err(s)?;
                Ok(report.max_rel_error())
            })(),
            GRAD_TOL,
        );
    }
}

fn harness_checks(r: &mut Runner, desk: &ProjectorConfig, opts: &SuiteOptions) {
    let mut rng = rng::stream(opts.seed, "suite.vspf");
    r.holds(
        "vspf_round_trip",
        (|| {
            for _ in 0..20 {
                let rank = rng.random_range(1..=4);
                let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
                let t64 = normal(&shape, &mut rng);
                let t32: Tensor<f32> = t64.cast();
                let back64: Tensor<f64> = vspf::decode(&vspf::encode(&t64)).map_err(s)?;
                let back32: Tensor<f32> = vspf::decode(&vspf::encode(&t32)).map_err(s)?;
                if !back64.bit_eq(&t64) || !back32.bit_eq(&t32) {
                    return Ok((false, 0.0));
                }
            }
            Ok((true, 20.0))
        })(),
    );

    r.at_most(
        "toy_train_halves_loss",
        (|| {
            let task = ToyTask::<f64>::generate(desk, 4, opts.seed).map_err(s)?;
            let (report, _) = toy_train(desk, &task, opts.train_steps, opts.train_lr).map_err(s)?;
            Ok(report.last() / report.initial())
        })(),
        0.5,
    );
}
