mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use vsp_core::dfi::{dfi_fuse, DfiWeights};
use vsp_core::sfe::{build_crop_pyramid, build_pool_pyramid};
use vsp_core::{ops, vspf, PatchGrid, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    common::random(shape, &mut common::rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_of_crop_is_crop(half in 0usize..6, a_off in 0usize..4, b_off in 0usize..4, c in 1usize..3, seed: u64) {
        let b = 1 + half;
        let a = b + 2 * a_off;
        let h = a + 2 * b_off;
        let x = tensor(&[h, h, c], seed);
        let twice = ops::center_crop(&ops::center_crop(&x, a).unwrap(), b).unwrap();
        prop_assert!(twice.bit_eq(&ops::center_crop(&x, b).unwrap()));
    }

    #[test]
    fn pool_to_full_size_is_identity_and_to_one_is_mean(h in 1usize..10, c in 1usize..3, seed: u64) {
        let x = tensor(&[h, h, c], seed);
        prop_assert!(ops::adaptive_avg_pool2d(&x, h).unwrap().bit_eq(&x));
        let g = ops::adaptive_avg_pool2d(&x, 1).unwrap();
        for ch in 0..c {
            let mean = x.data().iter().skip(ch).step_by(c).sum::<f64>() / (h * h) as f64;
            prop_assert!((g.data()[ch] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shift(n in 1usize..5, m in 1usize..9, shift in -50.0f64..50.0, seed: u64) {
        let x = tensor(&[n, m], seed);
        let shifted = x.map(|v| v + shift);
        let a = ops::softmax_rows(&x).unwrap();
        let b = ops::softmax_rows(&shifted).unwrap();
        prop_assert!(common::rel_err(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn vspf_round_trips_both_dtypes(dims in prop::collection::vec(1usize..5, 1..4), seed: u64) {
        let t = tensor(&dims, seed);
        let back: Tensor<f64> = vspf::decode(&vspf::encode(&t)).unwrap();
        prop_assert!(back.bit_eq(&t));
        let narrow = t.cast::<f32>();
        let back: Tensor<f32> = vspf::decode(&vspf::encode(&narrow)).unwrap();
        prop_assert!(back.bit_eq(&narrow));
    }

    #[test]
    fn crop_scales_nest(grid in 3usize..14, stride in 1usize..4, c in 1usize..3, seed: u64) {
        prop_assume!(grid > 2 * stride);
        let zp = PatchGrid::new(tensor(&[grid, grid, c], seed)).unwrap();
        let pyr = build_crop_pyramid(&zp, stride).unwrap();
        for w in pyr.scales.windows(2) {
            let inner = ops::center_crop(&w[1], w[0].shape()[0]).unwrap();
            prop_assert!(inner.bit_eq(&w[0]));
        }
        prop_assert!(pyr.scales.last().unwrap().bit_eq(zp.tensor()));
        let pooled = build_pool_pyramid(&zp, stride).unwrap();
        prop_assert_eq!(&pooled.sizes, &pyr.sizes);
    }

    #[test]
    fn full_cover_conv_ignores_joint_permutation(s in 1usize..5, cin in 1usize..3, cout in 1usize..3, seed: u64) {
        let mut r = common::rng(seed);
        let x = common::random(&[s, s, cin], &mut r);
        let k = common::random(&[s, s, cin, cout], &mut r);
        let mut perm: Vec<usize> = (0..s * s).collect();
        perm.shuffle(&mut r);
        let xp: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p * cin..(p + 1) * cin].to_vec()).collect();
        let block = cin * cout;
        let kp: Vec<f64> = perm.iter().flat_map(|&p| k.data()[p * block..(p + 1) * block].to_vec()).collect();
        let a = ops::conv2d_valid(&x, &k, None, s).unwrap();
        let b = ops::conv2d_valid(
            &Tensor::new(&[s, s, cin], xp).unwrap(),
            &Tensor::new(&[s, s, cin, cout], kp).unwrap(),
            None,
            s,
        )
        .unwrap();
        prop_assert!(common::rel_err(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn attended_values_stay_inside_value_hull(n in 1usize..6, m in 1usize..10, c in 2usize..6, seed: u64) {
        let mut r = common::rng(seed);
        let small = common::random(&[n, c], &mut r);
        let big = common::random(&[m, c], &mut r);
        let v = common::random(&[c, c], &mut r);
        let w = DfiWeights::from_maps(common::random(&[c, c], &mut r), common::random(&[c, c], &mut r), v.clone()).unwrap();
        let out = dfi_fuse(&small, &big, &w).unwrap();

        // V rows exactly as the fusion computes them
        let ones = Tensor::ones(&[c]).unwrap();
        let zeros = Tensor::zeros(&[c]).unwrap();
        let vals = ops::linear(&ops::layer_norm(&big, &ones, &zeros, 1e-5).unwrap(), &v, None).unwrap();
        for i in 0..n {
            let row = &out.fused.data()[i * 2 * c..(i + 1) * 2 * c];
            prop_assert_eq!(&row[..c], &small.data()[i * c..(i + 1) * c]);
            for ch in 0..c {
                let col = vals.data().iter().skip(ch).step_by(c);
                let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
                prop_assert!(row[c + ch] >= lo - 1e-9 && row[c + ch] <= hi + 1e-9);
            }
        }
    }
}
