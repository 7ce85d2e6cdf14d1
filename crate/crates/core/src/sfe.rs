//! Spatial feature extraction.
//!
//! The patch grid is turned into a pyramid of square maps (inward crops or
//! adaptive average pools), each map is reduced to one token by a
//! convolution whose kernel covers it exactly, and a separate stride-2
//! convolution over the full grid yields the fine-grained big map.

use crate::config::{self, Variant, BIG_STRIDE};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Square `G×G×C` grid of encoder patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T: Element> {
    grid: Tensor<T>,
}

impl<T: Element> PatchGrid<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        let (h, w, _) = grid.dims3("patch_grid")?;
        if h != w {
            return Err(TensorError::arg(
                "patch_grid",
                format!("grid must be square, got {h}x{w}"),
            ));
        }
        Ok(Self { grid })
    }

    /// Reshapes `N×C` patch tokens to their `√N×√N×C` layout.
    pub fn from_tokens(tokens: &Tensor<T>) -> Result<Self> {
        let (n, c) = tokens.dims2("patch_grid")?;
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(TensorError::arg(
                "patch_grid",
                format!("{n} patches do not form a square grid"),
            ));
        }
        Self::new(tokens.reshape(&[side, side, c])?)
    }

    /// Accepts either a `G×G×C` grid or `N×C` tokens.
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        match t.rank() {
            2 => Self::from_tokens(&t),
            _ => Self::new(t),
        }
    }

    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.grid
    }

    /// `G²×C` row-major patch tokens.
    pub fn flatten(&self) -> Tensor<T> {
        self.grid
            .reshape(&[self.side() * self.side(), self.channels()])
            .expect("same element count")
    }
}

/// Multi-scale maps with strictly increasing sides, the last equal to `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePyramid<T: Element> {
    pub variant: Variant,
    pub sizes: Vec<usize>,
    pub scales: Vec<Tensor<T>>,
}

impl<T: Element> ScalePyramid<T> {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

fn schedule(grid: usize, crop_stride: usize) -> Result<Vec<usize>> {
    if crop_stride == 0 {
        return Err(TensorError::arg("pyramid", "crop_stride must be positive"));
    }
    Ok(config::scale_sizes(grid, crop_stride))
}

/// Central-region-to-global pyramid of symmetric inward crops.
pub fn build_crop_pyramid<T: Element>(zp: &PatchGrid<T>, crop_stride: usize) -> Result<ScalePyramid<T>> {
    let sizes = schedule(zp.side(), crop_stride)?;
    let scales = sizes
        .iter()
        .map(|&s| ops::center_crop(zp.tensor(), s))
        .collect::<Result<_>>()?;
    Ok(ScalePyramid {
        variant: Variant::Cropping,
        sizes,
        scales,
    })
}

/// Abstract-to-specific pyramid of adaptive average pools; the last scale is the grid itself.
pub fn build_pool_pyramid<T: Element>(zp: &PatchGrid<T>, crop_stride: usize) -> Result<ScalePyramid<T>> {
    let sizes = schedule(zp.side(), crop_stride)?;
    let scales = sizes
        .iter()
        .map(|&s| ops::adaptive_avg_pool2d(zp.tensor(), s))
        .collect::<Result<_>>()?;
    Ok(ScalePyramid {
        variant: Variant::Pooling,
        sizes,
        scales,
    })
}

pub fn build_pyramid<T: Element>(zp: &PatchGrid<T>, variant: Variant, crop_stride: usize) -> Result<ScalePyramid<T>> {
    match variant {
        Variant::Cropping => build_crop_pyramid(zp, crop_stride),
        Variant::Pooling => build_pool_pyramid(zp, crop_stride),
    }
}

/// Parameter name of the full-cover kernel for pyramid level `j`.
pub fn scale_kernel_name(j: usize) -> String {
    format!("sfe.conv.{j:02}.weight")
}

pub fn scale_bias_name(j: usize) -> String {
    format!("sfe.conv.{j:02}.bias")
}

pub const BIG_WEIGHT: &str = "sfe.big.weight";
pub const BIG_BIAS: &str = "sfe.big.bias";

/// One full-cover kernel per pyramid level plus the stride-2 big kernel.
#[derive(Debug, Clone)]
pub struct ConvGroup<T: Element> {
    pub kernels: Vec<Tensor<T>>,
    pub biases: Vec<Option<Tensor<T>>>,
    pub big_kernel: Tensor<T>,
    pub big_bias: Option<Tensor<T>>,
}

impl<T: Element> ConvGroup<T> {
    pub fn param_specs(sizes: &[usize], enc_dim: usize, spatial_dim: usize, big_kernel: usize, bias: bool) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |w: String, b: String, k: usize| {
            let fan_in = k * k * enc_dim;
            specs.push(ParamSpec::new(w, &[k, k, enc_dim, spatial_dim], Init::Uniform { fan_in }));
            if bias {
                specs.push(ParamSpec::new(b, &[spatial_dim], Init::Uniform { fan_in }));
            }
        };
        for (j, &s) in sizes.iter().enumerate() {
            push(scale_kernel_name(j), scale_bias_name(j), s);
        }
        push(BIG_WEIGHT.into(), BIG_BIAS.into(), big_kernel);
        specs
    }

    /// Pulls the group out of a parameter store; biases are optional.
    pub fn from_params(store: &ParamStore<T>, scale_count: usize) -> Result<Self> {
        let kernels = (0..scale_count)
            .map(|j| store.require(&scale_kernel_name(j)).cloned())
            .collect::<Result<_>>()?;
        let biases = (0..scale_count)
            .map(|j| store.get(&scale_bias_name(j)).cloned())
            .collect();
        Ok(Self {
            kernels,
            biases,
            big_kernel: store.require(BIG_WEIGHT)?.clone(),
            big_bias: store.get(BIG_BIAS).cloned(),
        })
    }

    pub fn big_size(&self) -> usize {
        self.big_kernel.shape()[0]
    }
}

/// Spatial tokens (one per scale) plus the flattened big map.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTokenSet<T: Element> {
    pub small: Tensor<T>,
    pub big: Tensor<T>,
    pub big_side: usize,
}

/// One token per pyramid level: full-cover convolution of each scale, rows in pyramid order.
pub fn extract_spatial_tokens<T: Element>(pyr: &ScalePyramid<T>, group: &ConvGroup<T>) -> Result<Tensor<T>> {
    if pyr.scales.len() != group.kernels.len() {
        return Err(TensorError::shape(
            "extract_spatial_tokens",
            format!("{} scales but {} kernels", pyr.scales.len(), group.kernels.len()),
        ));
    }
    let mut rows = Vec::with_capacity(pyr.len());
    for ((scale, &size), (kernel, bias)) in pyr
        .scales
        .iter()
        .zip(&pyr.sizes)
        .zip(group.kernels.iter().zip(&group.biases))
    {
        check_full_cover(scale, kernel)?;
        let token = ops::conv2d_valid(scale, kernel, bias.as_ref(), size)?;
        let cout = token.len();
        rows.push(token.reshape(&[1, cout])?);
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    ops::concat(&refs, 0)
}

fn check_full_cover<T: Element>(scale: &Tensor<T>, kernel: &Tensor<T>) -> Result<()> {
    if kernel.rank() != 4 || kernel.shape()[..2] != scale.shape()[..2] {
        return Err(TensorError::shape(
            "extract_spatial_tokens",
            format!(
                "kernel {:?} does not exactly cover scale {:?}",
                kernel.shape(),
                scale.shape()
            ),
        ));
    }
    Ok(())
}

/// Stride-2 valid convolution over the full grid, flattened row-major to `m×C'`.
pub fn extract_big_map<T: Element>(zp: &PatchGrid<T>, group: &ConvGroup<T>) -> Result<(Tensor<T>, usize)> {
    let g = zp.side();
    let k = group.big_size();
    if k > g || !(g - k).is_multiple_of(BIG_STRIDE) {
        return Err(TensorError::arg(
            "extract_big_map",
            format!("grid {g} and big kernel {k} need an even, non-negative difference"),
        ));
    }
    let map = ops::conv2d_valid(zp.tensor(), &group.big_kernel, group.big_bias.as_ref(), BIG_STRIDE)?;
    let side = map.shape()[0];
    let cout = map.shape()[2];
    Ok((map.reshape(&[side * side, cout])?, side))
}

pub fn extract<T: Element>(zp: &PatchGrid<T>, variant: Variant, crop_stride: usize, group: &ConvGroup<T>) -> Result<SpatialTokenSet<T>> {
    let pyr = build_pyramid(zp, variant, crop_stride)?;
    let small = extract_spatial_tokens(&pyr, group)?;
    let (big, big_side) = extract_big_map(zp, group)?;
    Ok(SpatialTokenSet { small, big, big_side })
}

/// Equal-size windows enumerated top-to-bottom, left-to-right, one token each
/// from a shared full-cover kernel.
pub fn sliding_window_tokens<T: Element>(
    zp: &PatchGrid<T>,
    window: usize,
    stride: usize,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "sliding_window_tokens";
    let g = zp.side();
    if window == 0 || stride == 0 || window > g {
        return Err(TensorError::arg(OP, format!("window {window}, stride {stride} invalid for grid {g}")));
    }
    if !(g - window).is_multiple_of(stride) {
        return Err(TensorError::arg(
            OP,
            format!("stride {stride} does not tile grid {g} with window {window}"),
        ));
    }
    if kernel.rank() != 4 || kernel.shape()[..2] != [window, window] {
        return Err(TensorError::shape(OP, format!("kernel {:?} does not match window {window}", kernel.shape())));
    }
    let map = ops::conv2d_valid(zp.tensor(), kernel, bias, stride)?;
    let (side, cout) = (map.shape()[0], map.shape()[2]);
    map.reshape(&[side * side, cout])
}

/// Records the pyramid on a graph, returning one var per scale.
pub fn record_pyramid<T: Element>(g: &mut Graph<T>, zp: Var, variant: Variant, sizes: &[usize]) -> Result<Vec<Var>> {
    sizes
        .iter()
        .map(|&s| match variant {
            Variant::Cropping => g.center_crop(zp, s),
            Variant::Pooling => g.adaptive_avg_pool2d(zp, s),
        })
        .collect()
}

/// Records the full-cover convolutions; returns the `n×C'` token matrix.
pub fn record_spatial_tokens<T: Element>(
    g: &mut Graph<T>,
    scales: &[Var],
    sizes: &[usize],
    kernels: &[(Var, Option<Var>)],
) -> Result<Var> {
    if scales.len() != kernels.len() {
        return Err(TensorError::shape(
            "extract_spatial_tokens",
            format!("{} scales but {} kernels", scales.len(), kernels.len()),
        ));
    }
    let mut rows = Vec::with_capacity(scales.len());
    for ((&scale, &size), &(w, b)) in scales.iter().zip(sizes).zip(kernels) {
        check_full_cover(g.value(scale), g.value(w))?;
        let token = g.conv2d_valid(scale, w, b, size)?;
        let cout = g.value(token).len();
        rows.push(g.reshape(token, &[1, cout])?);
    }
    g.concat(&rows, 0)
}

/// Records the big-map convolution; returns the `m×C'` flattened map.
pub fn record_big_map<T: Element>(g: &mut Graph<T>, zp: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let map = g.conv2d_valid(zp, kernel, bias, BIG_STRIDE)?;
    let shape = g.value(map).shape().to_vec();
    g.reshape(map, &[shape[0] * shape[1], shape[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(g: usize, c: usize) -> PatchGrid<f64> {
        PatchGrid::new(Tensor::from_fn(&[g, g, c], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0).unwrap()).unwrap()
    }

    fn ones_group(sizes: &[usize], c: usize, cout: usize, big: usize) -> ConvGroup<f64> {
        ConvGroup {
            kernels: sizes.iter().map(|&s| Tensor::ones(&[s, s, c, cout]).unwrap()).collect(),
            biases: sizes.iter().map(|_| Some(Tensor::zeros(&[cout]).unwrap())).collect(),
            big_kernel: Tensor::ones(&[big, big, c, cout]).unwrap(),
            big_bias: None,
        }
    }

    #[test]
    fn crop_schedule_counts() {
        let zp = grid(24, 1);
        assert_eq!(build_crop_pyramid(&zp, 2).unwrap().sizes, vec![4, 8, 12, 16, 20, 24]);
        assert_eq!(build_crop_pyramid(&zp, 4).unwrap().sizes, vec![8, 16, 24]);
        assert_eq!(build_crop_pyramid(&zp, 1).unwrap().len(), 12);
        assert_eq!(build_crop_pyramid(&zp, 12).unwrap().sizes, vec![24]);
        assert!(build_crop_pyramid(&zp, 0).is_err());
    }

    #[test]
    fn pool_pyramid_last_scale_is_grid() {
        let zp = grid(24, 2);
        let pyr = build_pool_pyramid(&zp, 2).unwrap();
        assert_eq!(pyr.sizes, vec![4, 8, 12, 16, 20, 24]);
        assert!(pyr.scales.last().unwrap().bit_eq(zp.tensor()));
        let c = PatchGrid::new(Tensor::full(&[24, 24, 1], 3.25).unwrap()).unwrap();
        for s in build_pool_pyramid(&c, 2).unwrap().scales {
            assert!(s.data().iter().all(|&v| v == 3.25));
        }
    }

    #[test]
    fn constant_input_all_ones_kernels() {
        let v = 0.5;
        let c = 3;
        let zp = PatchGrid::new(Tensor::full(&[8, 8, c], v).unwrap()).unwrap();
        let group = ones_group(&[4, 8], c, 2, 4);
        for variant in Variant::ALL {
            let pyr = build_pyramid(&zp, variant, 2).unwrap();
            let tokens = extract_spatial_tokens(&pyr, &group).unwrap();
            assert_eq!(tokens.shape(), &[2, 2]);
            for (row, &s) in tokens.data().chunks(2).zip(&pyr.sizes) {
                let expected = v * (s * s * c) as f64;
                assert!(row.iter().all(|&x| (x - expected).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn big_map_sides() {
        let zp = grid(24, 1);
        for (k, m) in [(16, 25), (12, 49), (8, 81), (4, 121)] {
            let group = ones_group(&[24], 1, 1, k);
            let (big, side) = extract_big_map(&zp, &group).unwrap();
            assert_eq!(big.shape(), &[m, 1]);
            assert_eq!(side * side, m);
        }
        let odd = ones_group(&[24], 1, 1, 15);
        assert!(extract_big_map(&zp, &odd).is_err());
    }

    #[test]
    fn big_kernel_full_grid_equals_global_token() {
        let zp = grid(8, 2);
        let kernel = Tensor::from_fn(&[8, 8, 2, 3], |i| (i as f64 * 0.01).cos()).unwrap();
        let bias = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let group = ConvGroup {
            kernels: vec![kernel.clone()],
            biases: vec![Some(bias.clone())],
            big_kernel: kernel,
            big_bias: Some(bias),
        };
        let (big, side) = extract_big_map(&zp, &group).unwrap();
        assert_eq!(side, 1);
        let pyr = build_crop_pyramid(&zp, 4).unwrap();
        assert_eq!(pyr.sizes, vec![8]);
        let small = extract_spatial_tokens(&pyr, &group).unwrap();
        assert!(big.bit_eq(&small));
    }

    #[test]
    fn kernel_scale_mismatch_rejected() {
        let zp = grid(8, 1);
        let pyr = build_crop_pyramid(&zp, 2).unwrap();
        let wrong = ones_group(&[4, 6], 1, 1, 4);
        assert!(extract_spatial_tokens(&pyr, &wrong).is_err());
        let short = ones_group(&[8], 1, 1, 4);
        assert!(extract_spatial_tokens(&pyr, &short).is_err());
    }

    #[test]
    fn sliding_windows() {
        let zp = grid(24, 1);
        let k12 = Tensor::ones(&[12, 12, 1, 2]).unwrap();
        assert_eq!(sliding_window_tokens(&zp, 12, 12, &k12, None).unwrap().shape(), &[4, 2]);
        let k24 = Tensor::ones(&[24, 24, 1, 2]).unwrap();
        assert_eq!(sliding_window_tokens(&zp, 24, 5, &k24, None).unwrap().shape(), &[1, 2]);
        let k8 = Tensor::ones(&[8, 8, 1, 2]).unwrap();
        assert!(sliding_window_tokens(&zp, 8, 5, &k8, None).is_err());
    }

    #[test]
    fn patch_grid_validation() {
        assert!(PatchGrid::new(Tensor::<f32>::zeros(&[4, 5, 2]).unwrap()).is_err());
        let tokens = Tensor::<f32>::zeros(&[576, 3]).unwrap();
        assert_eq!(PatchGrid::from_tokens(&tokens).unwrap().side(), 24);
        assert!(PatchGrid::from_tokens(&Tensor::<f32>::zeros(&[575, 3]).unwrap()).is_err());
    }
}
