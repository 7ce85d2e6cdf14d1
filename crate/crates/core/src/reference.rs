//! Direct-loop reference implementations used by the invariant suite.
//!
//! These evaluate each operator from its defining formula, one output element
//! at a time, with no shared code paths with [`crate::ops`]. Shapes are
//! assumed valid; they panic otherwise.

use crate::tensor::Tensor;

/// Valid convolution of an `H×W×Cin` map with a `K×K×Cin×Cout` kernel.
pub fn conv2d(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize) -> Tensor<f64> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Vec::with_capacity(oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cin {
                            let x = input.get(&[oy * stride + ky, ox * stride + kx, ci]).unwrap();
                            let k = kernel.get(&[ky, kx, ci, co]).unwrap();
                            acc += x * k;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(&[oh, ow, cout], out).unwrap()
}

/// Adaptive average pooling with windows `[floor(i·H/S), ceil((i+1)·H/S))`.
pub fn adaptive_avg_pool2d(input: &Tensor<f64>, out: usize) -> Tensor<f64> {
    let (h, c) = (input.shape()[0], input.shape()[2]);
    let lo = |i: usize| ((i * h) as f64 / out as f64).floor() as usize;
    let hi = |i: usize| (((i + 1) * h) as f64 / out as f64).ceil() as usize;
    let mut data = Vec::with_capacity(out * out * c);
    for i in 0..out {
        for j in 0..out {
            for ch in 0..c {
                let mut sum = 0.0;
                let mut count = 0usize;
                for r in lo(i)..hi(i) {
                    for q in lo(j)..hi(j) {
                        sum += input.get(&[r, q, ch]).unwrap();
                        count += 1;
                    }
                }
                data.push(sum / count as f64);
            }
        }
    }
    Tensor::new(&[out, out, c], data).unwrap()
}

pub fn center_crop(input: &Tensor<f64>, size: usize) -> Tensor<f64> {
    let (h, c) = (input.shape()[0], input.shape()[2]);
    let off = (h - size) / 2;
    let mut data = Vec::with_capacity(size * size * c);
    for r in 0..size {
        for q in 0..size {
            for ch in 0..c {
                data.push(input.get(&[off + r, off + q, ch]).unwrap());
            }
        }
    }
    Tensor::new(&[size, size, c], data).unwrap()
}

/// `x·W + b` by triple loop.
pub fn linear(x: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (n, din, dout) = (x.shape()[0], x.shape()[1], weight.shape()[1]);
    let mut data = Vec::with_capacity(n * dout);
    for i in 0..n {
        for j in 0..dout {
            let mut acc = bias.map_or(0.0, |b| b.data()[j]);
            for k in 0..din {
                acc += x.get(&[i, k]).unwrap() * weight.get(&[k, j]).unwrap();
            }
            data.push(acc);
        }
    }
    Tensor::new(&[n, dout], data).unwrap()
}

/// Two-pass mean and variance per row.
pub fn layer_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (k, v) in row.iter().enumerate() {
            data.push((v - mean) / (var + eps).sqrt() * gamma.data()[k] + beta.data()[k]);
        }
    }
    Tensor::new(x.shape(), data).unwrap()
}

pub fn softmax_rows(m: &Tensor<f64>) -> Tensor<f64> {
    let cols = m.shape()[1];
    let mut data = Vec::with_capacity(m.len());
    for row in m.data().chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(m.shape(), data).unwrap()
}

/// `x·Φ(x)` with `Φ` the standard normal CDF.
pub fn gelu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}
