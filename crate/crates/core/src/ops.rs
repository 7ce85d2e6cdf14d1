//! Forward operators and their vector-Jacobian products.
//!
//! Feature maps are `H×W×C` (channels last), matrices are `rows×cols`,
//! convolution kernels are `KH×KW×Cin×Cout`. Every forward operator rejects
//! non-finite results.

use std::borrow::Cow;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Valid-mode (unpadded) 2-D convolution.
///
/// Output is `H'×W'×Cout` with `H' = (H - KH)/stride + 1`. Both spatial
/// extents must be reachable exactly; a configuration that would need padding
/// is an error.
pub fn conv2d_valid<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input, kernel, bias, stride)?;
    let cols = im2col(input.data(), &geom);
    let mut out = vec![T::zero(); geom.positions() * geom.cout];
    T::gemm(
        geom.positions(),
        geom.patch_len(),
        geom.cout,
        &cols,
        kernel.data(),
        &mut out,
    );
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(geom.cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    finish("conv2d_valid", vec![geom.out_h, geom.out_w, geom.cout], out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn new<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d_valid";
        let (h, w, cin) = input.dims3(OP)?;
        let [kh, kw, kcin, cout] = kernel.shape()[..] else {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                shape: kernel.shape().to_vec(),
            });
        };
        if stride == 0 {
            return Err(TensorError::arg(OP, "stride must be positive"));
        }
        if kcin != cin {
            return Err(TensorError::shape(
                OP,
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if kh > h || kw > w {
            return Err(TensorError::arg(
                OP,
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        if (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(TensorError::arg(
                OP,
                format!("stride {stride} does not tile input {h}x{w} with kernel {kh}x{kw} without padding"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::shape(
                    OP,
                    format!("bias shape {:?}, expected [{cout}]", b.shape()),
                ));
            }
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_full_cover(&self) -> bool {
        self.kh == self.h && self.kw == self.w
    }
}

/// One row per output position holding the `KH×KW×Cin` window it covers.
fn im2col<'a, T: Element>(input: &'a [T], g: &ConvGeometry) -> Cow<'a, [T]> {
    if g.is_full_cover() {
        // the single window is the whole input in the same layout
        return Cow::Borrowed(input);
    }
    let seg = g.kw * g.cin;
    let mut cols = Vec::with_capacity(g.positions() * g.patch_len());
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ky in 0..g.kh {
                let start = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.cin;
                cols.extend_from_slice(&input[start..start + seg]);
            }
        }
    }
    Cow::Owned(cols)
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeometry, grad_input: &mut [T]) {
    let seg = g.kw * g.cin;
    let mut rows = cols.chunks_exact(seg);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ky in 0..g.kh {
                let start = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.cin;
                let src = rows.next().expect("column count matches geometry");
                for (d, &s) in grad_input[start..start + seg].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// Gradients of [`conv2d_valid`] with respect to input, kernel and bias.
pub(crate) fn conv2d_valid_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input, kernel, None, stride)?;
    let (p, k, n) = (g.positions(), g.patch_len(), g.cout);
    let cols = im2col(input.data(), &g);
    let go = grad_out.data();

    let mut grad_kernel = vec![T::zero(); k * n];
    T::gemm_strided(k, p, n, &cols, (1, k as isize), go, (n as isize, 1), &mut grad_kernel);

    let mut grad_bias = vec![T::zero(); n];
    for row in go.chunks_exact(n) {
        for (b, &v) in grad_bias.iter_mut().zip(row) {
            *b += v;
        }
    }

    let grad_input = need_input.then(|| {
        let mut grad_cols = vec![T::zero(); p * k];
        T::gemm_strided(
            p,
            n,
            k,
            go,
            (n as isize, 1),
            kernel.data(),
            (1, n as isize),
            &mut grad_cols,
        );
        let mut grad_input = vec![T::zero(); input.len()];
        col2im_add(&grad_cols, &g, &mut grad_input);
        Tensor::from_parts(input.shape().to_vec(), grad_input)
    });

    Ok((
        grad_input,
        Tensor::from_parts(kernel.shape().to_vec(), grad_kernel),
        Tensor::from_parts(vec![n], grad_bias),
    ))
}

/// Half-open window `[floor(i*len/out), ceil((i+1)*len/out))` of adaptive pooling.
pub fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling of a square `H×H×C` map down to `S×S×C`.
pub fn adaptive_avg_pool2d<T: Element>(input: &Tensor<T>, out: usize) -> Result<Tensor<T>> {
    const OP: &str = "adaptive_avg_pool2d";
    let (h, w, c) = input.dims3(OP)?;
    if h != w {
        return Err(TensorError::arg(OP, format!("input must be square, got {h}x{w}")));
    }
    if out == 0 || out > h {
        return Err(TensorError::arg(OP, format!("output size {out} not in 1..={h}")));
    }
    let x = input.data();
    let mut y = vec![T::zero(); out * out * c];
    for i in 0..out {
        let (r0, r1) = adaptive_window(i, h, out);
        for j in 0..out {
            let (c0, c1) = adaptive_window(j, w, out);
            let dst = &mut y[(i * out + j) * c..(i * out + j + 1) * c];
            for r in r0..r1 {
                for q in c0..c1 {
                    let src = &x[(r * w + q) * c..(r * w + q + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let count = T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
            dst.iter_mut().for_each(|d| *d /= count);
        }
    }
    finish(OP, vec![out, out, c], y)
}

pub(crate) fn adaptive_avg_pool2d_backward<T: Element>(
    input_shape: &[usize],
    out: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let go = grad_out.data();
    let mut gi = vec![T::zero(); h * w * c];
    for i in 0..out {
        let (r0, r1) = adaptive_window(i, h, out);
        for j in 0..out {
            let (c0, c1) = adaptive_window(j, w, out);
            let count = T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
            let src = &go[(i * out + j) * c..(i * out + j + 1) * c];
            for r in r0..r1 {
                for q in c0..c1 {
                    let dst = &mut gi[(r * w + q) * c..(r * w + q + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s / count;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gi)
}

/// Square `size×size` window of an `H×W×C` map whose top-left corner is `(row, col)`.
pub fn crop<T: Element>(input: &Tensor<T>, row: usize, col: usize, size: usize) -> Result<Tensor<T>> {
    const OP: &str = "crop";
    let (h, w, c) = input.dims3(OP)?;
    if size == 0 || row + size > h || col + size > w {
        return Err(TensorError::arg(
            OP,
            format!("window {size}x{size} at ({row},{col}) exceeds {h}x{w}"),
        ));
    }
    let x = input.data();
    let mut y = Vec::with_capacity(size * size * c);
    for r in row..row + size {
        let start = (r * w + col) * c;
        y.extend_from_slice(&x[start..start + size * c]);
    }
    Ok(Tensor::from_parts(vec![size, size, c], y))
}

/// Symmetric inward crop of a square map to `size×size`; the margin must be even.
pub fn center_crop<T: Element>(input: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (margin_row, margin_col) = center_crop_offsets(input.shape(), size)?;
    crop(input, margin_row, margin_col, size)
}

pub(crate) fn center_crop_offsets(shape: &[usize], size: usize) -> Result<(usize, usize)> {
    const OP: &str = "center_crop";
    let [h, w, _] = shape[..] else {
        return Err(TensorError::Rank {
            op: OP,
            expected: 3,
            shape: shape.to_vec(),
        });
    };
    if h != w {
        return Err(TensorError::arg(OP, format!("input must be square, got {h}x{w}")));
    }
    if size == 0 || size > h {
        return Err(TensorError::arg(OP, format!("crop size {size} not in 1..={h}")));
    }
    if !(h - size).is_multiple_of(2) {
        return Err(TensorError::arg(
            OP,
            format!("margin {} is odd; crop {size} of {h} is not symmetric", h - size),
        ));
    }
    let m = (h - size) / 2;
    Ok((m, m))
}

pub(crate) fn crop_backward<T: Element>(
    input_shape: &[usize],
    row: usize,
    col: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let size = grad_out.shape()[0];
    let mut gi = vec![T::zero(); h * w * c];
    for (k, r) in (row..row + size).enumerate() {
        let start = (r * w + col) * c;
        gi[start..start + size * c]
            .copy_from_slice(&grad_out.data()[k * size * c..(k + 1) * size * c]);
    }
    Tensor::from_parts(input_shape.to_vec(), gi)
}

/// `a × b` for rank-2 operands.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), b.data(), &mut out);
    finish("matmul", vec![m, n], out)
}

/// `a × bᵀ` for rank-2 operands with equal column counts.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(TensorError::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm_strided(m, k, n, a.data(), (k as isize, 1), b.data(), (1, k as isize), &mut out);
    finish("matmul_nt", vec![m, n], out)
}

/// `aᵀ × b` for rank-2 operands with equal row counts.
pub(crate) fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(TensorError::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm_strided(m, k, n, a.data(), (1, m as isize), b.data(), (n as isize, 1), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Affine map `y = xW + b` over the rows of `x`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let (n, din) = x.dims2(OP)?;
    let (wdin, dout) = weight.dims2(OP)?;
    if din != wdin {
        return Err(TensorError::shape(
            OP,
            format!("input width {din}, weight expects {wdin}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?}, expected [{dout}]", b.shape()),
            ));
        }
    }
    let mut out = vec![T::zero(); n * dout];
    T::gemm(n, din, dout, x.data(), weight.data(), &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    finish(OP, vec![n, dout], out)
}

/// Column sums of a rank-2 tensor.
pub(crate) fn sum_rows<T: Element>(g: &Tensor<T>) -> Tensor<T> {
    let cols = *g.shape().last().expect("rank >= 1");
    let mut out = vec![T::zero(); cols];
    for row in g.data().chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![cols], out)
}

/// Row-wise layer normalization with affine `gamma`/`beta`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_stats(x, gamma, beta, eps)?.0)
}

/// Returns the normalized output plus per-row `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_stats<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    const OP: &str = "layer_norm";
    let (n, d) = x.dims2(OP)?;
    if d < 2 {
        return Err(TensorError::arg(OP, "normalized width must be at least 2"));
    }
    if !(eps > 0.0) {
        return Err(TensorError::arg(OP, "eps must be positive"));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::shape(
            OP,
            format!("gamma {:?} / beta {:?}, expected [{d}]", gamma.shape(), beta.shape()),
        ));
    }
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut out = Vec::with_capacity(n * d);
    let mut rstd = Vec::with_capacity(n);
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        out.extend(
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(&v, (&g, &b))| (v - mean) * r * g + b),
        );
    }
    Ok((finish(OP, vec![n, d], out)?, rstd))
}

pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    rstd: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().expect("rank 2");
    let dt = T::from_f64(d as f64);
    let mut gx = Vec::with_capacity(x.len());
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    for ((row, gy), &r) in x
        .data()
        .chunks_exact(d)
        .zip(grad_out.data().chunks_exact(d))
        .zip(rstd)
    {
        let mean = row.iter().copied().sum::<T>() / dt;
        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * r).collect();
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let g = gy[j] * gamma.data()[j];
            sum_g += g;
            sum_gx += g * xhat[j];
            ggamma[j] += gy[j] * xhat[j];
            gbeta[j] += gy[j];
        }
        for j in 0..d {
            let g = gy[j] * gamma.data()[j];
            gx.push(r / dt * (dt * g - sum_g - xhat[j] * sum_gx));
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![d], ggamma),
        Tensor::from_parts(vec![d], gbeta),
    )
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Element>(m: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "softmax_rows";
    let (n, cols) = m.dims2(OP)?;
    if m.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::NonFinite { op: OP });
    }
    let mut out = Vec::with_capacity(n * cols);
    for row in m.data().chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    finish(OP, vec![n, cols], out)
}

pub(crate) fn softmax_rows_backward<T: Element>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let cols = y.shape()[1];
    let mut gx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(cols).zip(grad_out.data().chunks_exact(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = parts
        .first()
        .ok_or_else(|| TensorError::arg(OP, "no parts given"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::arg(OP, format!("axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let agree = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !agree {
            return Err(TensorError::shape(
                OP,
                format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits a gradient of a concatenation back into per-part gradients.
pub(crate) fn concat_backward<T: Element>(
    part_shapes: &[Vec<usize>],
    axis: usize,
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let outer: usize = grad_out.shape()[..axis].iter().product();
    let inner: usize = grad_out.shape()[axis + 1..].iter().product();
    let total = grad_out.shape()[axis] * inner;
    let mut offset = 0;
    part_shapes
        .iter()
        .map(|shape| {
            let block = shape[axis] * inner;
            let mut data = Vec::with_capacity(outer * block);
            for o in 0..outer {
                let start = o * total + offset;
                data.extend_from_slice(&grad_out.data()[start..start + block]);
            }
            offset += block;
            Tensor::from_parts(shape.clone(), data)
        })
        .collect()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let out = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
        .collect();
    finish("gelu", x.shape().to_vec(), out)
}

pub(crate) fn gelu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
            g * (cdf + v * pdf)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub(crate) fn zip_map<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    finish(op, a.shape().to_vec(), data)
}

fn finish<T: Element>(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
    let t = Tensor::from_parts(shape, data);
    t.ensure_finite(op)?;
    Ok(t)
}
