mod common;

use vsp_core::config::{big_side, scale_sizes};
use vsp_core::sfe::{
    build_pyramid, extract, extract_big_map, extract_spatial_tokens, sliding_window_tokens, ConvGroup,
};
use vsp_core::{ops, PatchGrid, ProjectorConfig, Tensor, Variant};

fn grid(g: usize, c: usize, seed: u64) -> PatchGrid<f64> {
    PatchGrid::new(common::random(&[g, g, c], &mut common::rng(seed))).unwrap()
}

fn random_group(sizes: &[usize], c: usize, cout: usize, big: usize, seed: u64) -> ConvGroup<f64> {
    let mut r = common::rng(seed);
    ConvGroup {
        kernels: sizes.iter().map(|&s| common::random(&[s, s, c, cout], &mut r)).collect(),
        biases: sizes.iter().map(|_| Some(common::random(&[cout], &mut r))).collect(),
        big_kernel: common::random(&[big, big, c, cout], &mut r),
        big_bias: Some(common::random(&[cout], &mut r)),
    }
}

#[test]
fn schedules() {
    assert_eq!(scale_sizes(24, 2), vec![4, 8, 12, 16, 20, 24]);
    assert_eq!(scale_sizes(24, 1).len(), 12);
    assert_eq!(scale_sizes(24, 4), vec![8, 16, 24]);
    assert_eq!(scale_sizes(8, 2), vec![4, 8]);
    for (k, m) in [(4, 121), (8, 81), (12, 49), (16, 25), (24, 1)] {
        let side = big_side(24, k);
        assert_eq!(side * side, m);
    }
    let cfg = ProjectorConfig::default();
    assert_eq!(cfg.scale_count(), 6);
    assert_eq!(cfg.big_side(), 5);
}

#[test]
fn pyramid_shapes_for_both_variants() {
    let zp = grid(24, 2, 1);
    for variant in Variant::ALL {
        let pyr = build_pyramid(&zp, variant, 2).unwrap();
        assert_eq!(pyr.sizes, vec![4, 8, 12, 16, 20, 24]);
        for (t, &s) in pyr.scales.iter().zip(&pyr.sizes) {
            assert_eq!(t.shape(), &[s, s, 2]);
        }
        assert!(pyr.scales[5].bit_eq(zp.tensor()));
    }
}

#[test]
fn constant_grid_with_ones_kernels() {
    let v = 0.5;
    let zp = PatchGrid::new(Tensor::full(&[24, 24, 3], v).unwrap()).unwrap();
    for variant in Variant::ALL {
        let pyr = build_pyramid(&zp, variant, 2).unwrap();
        let group = ConvGroup {
            kernels: pyr.sizes.iter().map(|&s| Tensor::ones(&[s, s, 3, 2]).unwrap()).collect(),
            biases: vec![None; pyr.len()],
            big_kernel: Tensor::ones(&[16, 16, 3, 2]).unwrap(),
            big_bias: None,
        };
        let tokens = extract_spatial_tokens(&pyr, &group).unwrap();
        assert_eq!(tokens.shape(), &[6, 2]);
        for (j, &s) in pyr.sizes.iter().enumerate() {
            let want = v * (s * s * 3) as f64;
            for ch in 0..2 {
                assert!((tokens.get(&[j, ch]).unwrap() - want).abs() <= 1e-9 * want);
            }
        }
    }
}

#[test]
fn spatial_tokens_match_loop_oracle() {
    let zp = grid(8, 2, 2);
    let sizes = scale_sizes(8, 1);
    let group = random_group(&sizes, 2, 3, 4, 3);
    for variant in Variant::ALL {
        let set = extract(&zp, variant, 1, &group).unwrap();
        assert_eq!(set.small.shape(), &[sizes.len(), 3]);
        for (j, &s) in sizes.iter().enumerate() {
            let scale = match variant {
                Variant::Cropping => common::crop(zp.tensor().data(), 8, 2, s),
                Variant::Pooling => common::pool(zp.tensor().data(), 8, 2, s),
            };
            let b = group.biases[j].as_ref().unwrap();
            let want = common::conv(&scale, (s, s, 2), group.kernels[j].data(), (s, s, 3), b.data(), s);
            let got = &set.small.data()[j * 3..(j + 1) * 3];
            assert!(common::rel_err(got, &want) <= 1e-6, "{variant} scale {s}");
        }
        let big = common::conv(zp.tensor().data(), (8, 8, 2), group.big_kernel.data(), (4, 4, 3), group.big_bias.as_ref().unwrap().data(), 2);
        assert_eq!(set.big_side, 3);
        assert!(common::rel_err(set.big.data(), &big) <= 1e-6);
    }
}

#[test]
fn tiny_two_scale_example() {
    // C = 2, C' = 3, scales of side 2 and 4
    let zp = grid(4, 2, 4);
    let group = random_group(&[2, 4], 2, 3, 2, 5);
    let set = extract(&zp, Variant::Cropping, 1, &group).unwrap();
    assert_eq!(set.small.shape(), &[2, 3]);
    assert_eq!(set.big.shape(), &[4, 3]);
}

#[test]
fn big_kernel_covering_the_grid_gives_one_row() {
    let zp = grid(24, 2, 6);
    let group = random_group(&[24], 2, 3, 24, 7);
    let (big, side) = extract_big_map(&zp, &group).unwrap();
    assert_eq!((big.shape(), side), (&[1usize, 3][..], 1));
}

#[test]
fn sliding_windows() {
    let zp = grid(6, 2, 8);
    let mut r = common::rng(9);
    let k4 = common::random(&[4, 4, 2, 3], &mut r);
    assert_eq!(sliding_window_tokens(&zp, 4, 2, &k4, None).unwrap().shape(), &[4, 3]);

    // one window over the whole grid is the global full-cover token
    let k6 = common::random(&[6, 6, 2, 3], &mut r);
    let one = sliding_window_tokens(&zp, 6, 1, &k6, None).unwrap();
    let global = ops::conv2d_valid(zp.tensor(), &k6, None, 6).unwrap();
    assert_eq!(one.data(), global.data());

    // nine windows, row-major, against an explicit window loop
    let k2 = common::random(&[2, 2, 2, 3], &mut r);
    let b = common::random(&[3], &mut r);
    let got = sliding_window_tokens(&zp, 2, 2, &k2, Some(&b)).unwrap();
    assert_eq!(got.shape(), &[9, 3]);
    let x = zp.tensor().data();
    for wi in 0..3 {
        for wj in 0..3 {
            let mut window = Vec::new();
            for r in 0..2 {
                let row = (2 * wi + r) * 6 + 2 * wj;
                window.extend_from_slice(&x[row * 2..(row + 2) * 2]);
            }
            let want = common::conv(&window, (2, 2, 2), k2.data(), (2, 2, 3), b.data(), 2);
            let idx = wi * 3 + wj;
            assert!(common::rel_err(&got.data()[idx * 3..idx * 3 + 3], &want) <= 1e-12);
        }
    }

    assert!(sliding_window_tokens(&zp, 4, 3, &k4, None).is_err());
    assert!(sliding_window_tokens(&zp, 7, 1, &k4, None).is_err());
    assert!(sliding_window_tokens(&zp, 2, 2, &k4, None).is_err());
}

#[test]
fn mismatched_kernel_is_rejected() {
    let zp = grid(8, 2, 10);
    let pyr = build_pyramid(&zp, Variant::Cropping, 2).unwrap();
    let mut group = random_group(&pyr.sizes, 2, 3, 4, 11);
    group.kernels[0] = Tensor::zeros(&[3, 3, 2, 3]).unwrap();
    assert!(extract_spatial_tokens(&pyr, &group).is_err());
    group.kernels.pop();
    assert!(extract_spatial_tokens(&pyr, &group).is_err());
}
