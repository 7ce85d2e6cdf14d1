mod common;

use vsp_core::dfi::export_attention;
use vsp_core::params::{load_checkpoint, save_checkpoint};
use vsp_core::suite::{run_invariant_suite, SuiteOptions};
use vsp_core::synth::{gen_synthetic_features, SynthKind};
use vsp_core::train::{toy_train, ToyTask, TrainError};
use vsp_core::vspf::{self, FormatError};
use vsp_core::{Projector, ProjectorConfig, Tensor, TensorError, Variant};

#[test]
fn vspf_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.vspf");
    let t = common::random(&[24, 24, 8], &mut common::rng(1)).cast::<f32>();
    vspf::save_features(&path, &t).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 13 + 12 + 24 * 24 * 8 * 4);
    let back: Tensor<f32> = vspf::load_features(&path).unwrap();
    assert!(back.bit_eq(&t));
    let widened: Tensor<f64> = vspf::load_features(&path).unwrap();
    assert!(widened.bit_eq(&t.cast::<f64>()));
}

#[test]
fn vspf_rejections() {
    let t = common::random(&[3, 4], &mut common::rng(2));
    let bytes = vspf::encode(&t);

    let err = vspf::decode::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, FormatError::PayloadShort { .. }));
    assert_eq!(err.code(), "payload-short");

    let err = vspf::decode::<f32>(&bytes).unwrap_err();
    assert_eq!(err.code(), "dtype-mismatch");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(vspf::decode::<f64>(&bad).unwrap_err().code(), "bad-magic");

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert_eq!(vspf::decode::<f64>(&bad).unwrap_err().code(), "bad-version");

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert_eq!(vspf::decode::<f64>(&bad).unwrap_err().code(), "bad-dtype");

    assert_eq!(vspf::decode::<f64>(&bytes[..10]).unwrap_err().code(), "header-short");

    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(vspf::decode::<f64>(&long).unwrap_err().code(), "trailing-bytes");

    let missing = vspf::load_features::<f64>("/nonexistent/grid.vspf").unwrap_err();
    assert_eq!(missing.code(), "io");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.vspf");
    let proj = Projector::<f64>::init(&ProjectorConfig::desk()).unwrap();
    save_checkpoint(&path, proj.params()).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.len(), proj.params().len());
    for (name, t) in proj.params().iter() {
        assert!(back.get(name).unwrap().bit_eq(t), "{name}");
    }
}

#[test]
fn synthetic_features() {
    let g = gen_synthetic_features::<f64>(SynthKind::Gradient, 24, 2, 0).unwrap();
    assert_eq!(g.tensor().get(&[0, 0, 1]), Some(0.0));
    assert_eq!(g.tensor().get(&[23, 23, 0]), Some(1.0));
    let c = gen_synthetic_features::<f64>(SynthKind::Checker, 4, 1, 0).unwrap();
    assert_eq!(&c.tensor().data()[..4], &[1.0, -1.0, 1.0, -1.0]);
    let k = gen_synthetic_features::<f32>("constant:2.5".parse().unwrap(), 3, 2, 0).unwrap();
    assert!(k.tensor().data().iter().all(|&v| v == 2.5));

    let a = gen_synthetic_features::<f64>(SynthKind::Noise, 24, 16, 7).unwrap();
    let b = gen_synthetic_features::<f64>(SynthKind::Noise, 24, 16, 7).unwrap();
    let other = gen_synthetic_features::<f64>(SynthKind::Noise, 24, 16, 8).unwrap();
    assert!(a.tensor().bit_eq(b.tensor()));
    assert!(!a.tensor().bit_eq(other.tensor()));
    assert!("sparkle".parse::<SynthKind>().is_err());
}

#[test]
fn toy_training_halves_loss_for_both_variants() {
    for variant in Variant::ALL {
        let cfg = ProjectorConfig::desk().with_variant(variant);
        let task = ToyTask::<f64>::generate(&cfg, 4, 3).unwrap();
        let (report, trained) = toy_train(&cfg, &task, 200, 0.5).unwrap();
        assert_eq!(report.losses.len(), 201);
        assert!(report.last() <= 0.5 * report.initial(), "{variant}: {} -> {}", report.initial(), report.last());
        assert!(report.losses.windows(2).all(|w| w[1] <= w[0]));
        let replay = vsp_core::train::evaluate(&trained, &task).unwrap();
        assert_eq!(replay, report.last());
    }
}

#[test]
fn toy_training_edge_cases() {
    let cfg = ProjectorConfig::desk();
    let task = ToyTask::<f64>::generate(&cfg, 1, 5).unwrap();
    let (flat, _) = toy_train(&cfg, &task, 3, 0.0).unwrap();
    assert!(flat.losses.iter().all(|&l| l == flat.initial()));

    let (single, _) = toy_train(&cfg, &task, 20, 1.0).unwrap();
    assert!(single.losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(single.last() < single.initial());

    assert!(matches!(toy_train(&cfg, &task, 0, 0.1), Err(TrainError::NoSteps)));
    assert!(matches!(toy_train(&cfg, &task, 1, f64::NAN), Err(TrainError::BadLearningRate(_))));
}

#[test]
fn attention_dump_at_published_geometry() {
    let cfg = ProjectorConfig {
        enc_dim: 4,
        spatial_dim: 8,
        llm_dim: 8,
        ..ProjectorConfig::default()
    };
    let proj = Projector::<f64>::init(&cfg).unwrap();
    let zp = gen_synthetic_features(SynthKind::Noise, 24, 4, 0).unwrap();
    let out = proj.forward(&zp).unwrap();
    let map = export_attention(out.fusion.as_ref().unwrap());
    assert_eq!((map.rows(), map.cols()), (6, 25));
    let csv = map.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("query,k1,") && lines[0].ends_with(",k25"));
    for line in &lines[1..] {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }
}

/// Adaptive pooling with the window end rounded down instead of up.
fn floor_end_pool(x: &Tensor<f64>, s: usize) -> Result<Tensor<f64>, TensorError> {
    let (h, c) = (x.shape()[0], x.shape()[2]);
    let mut out = Vec::new();
    for i in 0..s {
        for j in 0..s {
            for ch in 0..c {
                let (r0, r1) = (i * h / s, (i + 1) * h / s);
                let (q0, q1) = (j * h / s, (j + 1) * h / s);
                let mut acc = 0.0;
                for r in r0..r1 {
                    for q in q0..q1 {
                        acc += x.get(&[r, q, ch]).unwrap();
                    }
                }
                out.push(acc / ((r1 - r0) * (q1 - q0)) as f64);
            }
        }
    }
    Tensor::new(&[s, s, c], out)
}

#[test]
fn suite_catches_a_broken_pool_window() {
    let cfg = ProjectorConfig::desk();
    let good = run_invariant_suite(&cfg, &SuiteOptions::default());
    assert!(good.passed(), "{good}");

    let opts = SuiteOptions {
        pool: floor_end_pool,
        ..Default::default()
    };
    let report = run_invariant_suite(&cfg, &opts);
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    assert_eq!(failed, vec!["pool_oracle"]);
}

#[test]
fn suite_reports_scale_count_for_coarse_stride() {
    let cfg = ProjectorConfig {
        crop_stride: 4,
        ..ProjectorConfig::default()
    };
    let report = run_invariant_suite(
        &cfg,
        &SuiteOptions {
            oracle_cases: 5,
            train_steps: 50,
            ..Default::default()
        },
    );
    let check = report.get("scale_count").unwrap();
    assert!(check.passed);
    assert_eq!(check.metric, 3.0);
}
