//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! Runs sequentially on the calling thread; the latency criterion needs the
//! machine to itself, so this target has no libtest harness.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use vsp_core::bench::{prefill_ratio, time_projector};
use vsp_core::config::{big_side, scale_sizes};
use vsp_core::dfi::{dfi_fuse, DfiWeights};
use vsp_core::gradcheck::{check_projector, GradCheckOptions};
use vsp_core::projector::param_group;
use vsp_core::sfe::{build_crop_pyramid, build_pool_pyramid};
use vsp_core::synth::{gen_synthetic_features, SynthKind};
use vsp_core::train::{toy_train, ToyTask};
use vsp_core::{ops, PatchGrid, Projector, ProjectorConfig, Tensor, Variant};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Criterion = fn() -> Outcome;

fn token_accounting() -> Outcome {
    let cfg = ProjectorConfig::default();
    let n = cfg.visual_token_count();
    let parts = (cfg.patch_count(), cfg.scale_count());
    outcome(n == 582 && parts == (576, 6), format!("tokens={n} patch={} spatial={}", parts.0, parts.1))
}

fn scale_schedules() -> Outcome {
    let want: [(usize, Vec<usize>); 3] = [
        (1, (1..=12).map(|j| 2 * j).collect()),
        (2, vec![4, 8, 12, 16, 20, 24]),
        (4, vec![8, 16, 24]),
    ];
    let counts: Vec<usize> = want.iter().map(|(s, _)| scale_sizes(24, *s).len()).collect();
    let ok = want.iter().all(|(s, sizes)| &scale_sizes(24, *s) == sizes);
    outcome(ok, format!("counts={counts:?}"))
}

fn big_map_sizes() -> Outcome {
    let lens: Vec<usize> = [4, 8, 12, 16].iter().map(|&k| big_side(24, k).pow(2)).collect();
    outcome(lens == [121, 81, 49, 25], format!("lengths={lens:?}"))
}

fn oracle_equivalence() -> Outcome {
    const CASES: usize = 200;
    let mut r = common::rng(0x0a11);
    let mut worst = [0.0f64; 4];
    for _ in 0..CASES {
        let k = r.random_range(1..=4);
        let stride = r.random_range(1..=3);
        let (oh, ow) = (r.random_range(1..=4), r.random_range(1..=4));
        let (cin, cout) = (r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = ((oh - 1) * stride + k, (ow - 1) * stride + k);
        let x = common::random(&[h, w, cin], &mut r);
        let kern = common::random(&[k, k, cin, cout], &mut r);
        let b = common::random(&[cout], &mut r);
        let got = ops::conv2d_valid(&x, &kern, Some(&b), stride).unwrap();
        let want = common::conv(x.data(), (h, w, cin), kern.data(), (k, k, cout), b.data(), stride);
        worst[0] = worst[0].max(common::rel_err(got.data(), &want));

        let h = r.random_range(1..=12);
        let s = r.random_range(1..=h);
        let c = r.random_range(1..=3);
        let x = common::random(&[h, h, c], &mut r);
        let got = ops::adaptive_avg_pool2d(&x, s).unwrap();
        worst[1] = worst[1].max(common::rel_err(got.data(), &common::pool(x.data(), h, c, s)));

        let s = r.random_range(1..=8);
        let h = s + 2 * r.random_range(0..=4);
        let x = common::random(&[h, h, c], &mut r);
        let got = ops::center_crop(&x, s).unwrap();
        worst[2] = worst[2].max(common::rel_err(got.data(), &common::crop(x.data(), h, c, s)));

        let (n, din, dout) = (r.random_range(1..=6), r.random_range(1..=8), r.random_range(1..=6));
        let x = common::random(&[n, din], &mut r);
        let w = common::random(&[din, dout], &mut r);
        let b = common::random(&[dout], &mut r);
        let got = ops::linear(&x, &w, Some(&b)).unwrap();
        let want = common::linear(x.data(), (n, din), w.data(), dout, b.data());
        worst[3] = worst[3].max(common::rel_err(got.data(), &want));
    }
    outcome(
        worst.iter().all(|&e| e <= 1e-6),
        format!("cases={CASES} conv={:.1e} pool={:.1e} crop={:.1e} linear={:.1e}", worst[0], worst[1], worst[2], worst[3]),
    )
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for variant in Variant::ALL {
        for dfi in [true, false] {
            let cfg = ProjectorConfig {
                dfi_enabled: dfi,
                ..ProjectorConfig::desk().with_variant(variant)
            };
            let proj = Projector::<f64>::init(&cfg).unwrap();
            let zp = gen_synthetic_features(SynthKind::Noise, cfg.grid, cfg.enc_dim, 1).unwrap();
            let target = common::random(&[cfg.visual_token_count(), cfg.llm_dim], &mut common::rng(2));
            let opts = GradCheckOptions {
                max_coords: None,
                ..Default::default()
            };
            let report = match check_projector(&proj, &zp, &target, opts) {
                Ok(r) => r,
                Err(e) => return outcome(false, e.to_string()),
            };
            let want: BTreeSet<&str> = Projector::<f64>::param_specs(&cfg).iter().map(|s| param_group(&s.name)).collect();
            let seen: BTreeSet<&str> = report.params.iter().map(|p| param_group(&p.name)).collect();
            ok &= want == seen && report.max_rel_error() <= 1e-4;
            worst = worst.max(report.max_rel_error());
        }
    }
    outcome(ok, format!("max_rel_err={worst:.2e} configs=4"))
}

fn fusion_invariants() -> Outcome {
    let mut ok = true;
    let mut row_err = 0.0f64;
    for variant in Variant::ALL {
        let cfg = ProjectorConfig::desk().with_variant(variant);
        let proj = Projector::<f64>::init(&cfg).unwrap();
        let zp = gen_synthetic_features(SynthKind::Noise, cfg.grid, cfg.enc_dim, 3).unwrap();
        let out = proj.forward(&zp).unwrap();
        let fusion = out.fusion.unwrap();
        let c = cfg.spatial_dim;
        for (i, row) in fusion.fused.data().chunks(2 * c).enumerate() {
            ok &= row[..c] == out.small.data()[i * c..(i + 1) * c];
        }
        for row in fusion.attn.data().chunks(fusion.attn.shape()[1]) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut r = common::rng(4);
    let c = 8;
    let w = DfiWeights::from_maps(
        common::random(&[c, c], &mut r),
        common::random(&[c, c], &mut r),
        common::random(&[c, c], &mut r),
    )
    .unwrap();
    let small = common::random(&[6, c], &mut r);
    let key = common::random(&[1, c], &mut r);
    let m = 25;
    let same = Tensor::from_fn(&[m, c], |i| key.data()[i % c]).unwrap();
    let uniform = dfi_fuse(&small, &same, &w).unwrap();
    let uniform_err = uniform.attn.data().iter().map(|a| (a - 1.0 / m as f64).abs()).fold(0.0, f64::max);
    let single = dfi_fuse(&small, &key, &w).unwrap();
    let single_err = single.attn.data().iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max);

    ok &= row_err <= 1e-6 && uniform_err <= 1e-6 && single_err <= 1e-6;
    outcome(ok, format!("row_sum_err={row_err:.1e} uniform_err={uniform_err:.1e} single_err={single_err:.1e}"))
}

fn trainability() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for variant in Variant::ALL {
        let cfg = ProjectorConfig::desk().with_variant(variant);
        let task = ToyTask::<f64>::generate(&cfg, 4, 0).unwrap();
        let (a, _) = toy_train(&cfg, &task, 200, 0.5).unwrap();
        let (b, _) = toy_train(&cfg, &task, 200, 0.5).unwrap();
        let ratio = a.last() / a.initial();
        let repeat = a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
        ok &= ratio <= 0.5 && repeat;
        detail.push(format!("{variant}: ratio={ratio:.3} repeatable={repeat}"));
    }
    outcome(ok, detail.join(" "))
}

fn prefill_overhead() -> Outcome {
    let r = prefill_ratio(582, 576, 4096, 32);
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    let ratios_ok = round4(r.linear) == 1.0104
        && round4(r.quadratic) <= 1.0209
        && r.total > r.linear
        && r.total <= r.quadratic;

    let cfg = ProjectorConfig::full_scale();
    let proj = Projector::<f32>::init(&cfg).unwrap();
    let zp = gen_synthetic_features(SynthKind::Noise, cfg.grid, cfg.enc_dim, 5).unwrap();
    let timing = time_projector(&proj, &zp, 3, 100).unwrap();
    let share = timing.spatial_share();
    outcome(
        ratios_ok && share <= 0.25,
        format!(
            "linear={:.6} quadratic={:.6} total={:.6} spatial_share={share:.3} (spatial {:.1} ms / full {:.1} ms over {} runs)",
            r.linear,
            r.quadratic,
            r.total,
            timing.spatial.as_secs_f64() * 1e3,
            timing.full.as_secs_f64() * 1e3,
            timing.iterations
        ),
    )
}

fn pyramid_laws() -> Outcome {
    let mut r = common::rng(9);
    let mut ok = true;
    for _ in 0..100 {
        let stride = r.random_range(1..=4);
        let g = 2 * stride + r.random_range(1..=16);
        let c = r.random_range(1..=4);
        let zp = PatchGrid::new(common::random(&[g, g, c], &mut r)).unwrap();
        let crops = build_crop_pyramid(&zp, stride).unwrap();
        for (j, scale) in crops.scales.iter().enumerate() {
            let outer = crops.scales.last().unwrap();
            ok &= ops::center_crop(outer, crops.sizes[j]).unwrap().bit_eq(scale);
            if j > 0 {
                ok &= ops::center_crop(scale, crops.sizes[j - 1]).unwrap().bit_eq(&crops.scales[j - 1]);
            }
        }
        let pools = build_pool_pyramid(&zp, stride).unwrap();
        ok &= pools.scales.last().unwrap().bit_eq(zp.tensor());
        ok &= crops.scales.last().unwrap().bit_eq(zp.tensor());
    }
    outcome(ok, "grids=100")
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion, Duration); 9] = [
        ("token_accounting", token_accounting, Duration::from_secs(1)),
        ("scale_schedules", scale_schedules, Duration::from_secs(1)),
        ("big_map_sizes", big_map_sizes, Duration::from_secs(1)),
        ("oracle_equivalence", oracle_equivalence, Duration::from_secs(30)),
        ("gradient_correctness", gradient_correctness, Duration::from_secs(120)),
        ("fusion_invariants", fusion_invariants, Duration::from_secs(5)),
        ("trainability", trainability, Duration::from_secs(120)),
        ("prefill_overhead", prefill_overhead, Duration::from_secs(120)),
        ("pyramid_laws", pyramid_laws, Duration::from_secs(10)),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let passed = out.passed && elapsed < *budget;
        failures += usize::from(!passed);
        println!(
            "criterion {} {name}: {} [{:.2}s / {}s] {}",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            out.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
