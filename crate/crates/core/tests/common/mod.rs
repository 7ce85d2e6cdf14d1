//! Loop oracles written straight from operator definitions, plus random helpers.
//! Nothing here calls into `vsp_core::ops` or `vsp_core::reference`.

#![allow(dead_code)]

use rand::Rng;
use rand_xoshiro::SplitMix64;
use rand::SeedableRng;
use vsp_core::Tensor;

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `|a - b| / max(|a|, |b|, 1)`, the largest over all elements.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn at3(t: &[f64], w: usize, c: usize, r: usize, q: usize, ch: usize) -> f64 {
    t[(r * w + q) * c + ch]
}

/// Seven nested loops: output row, output col, out channel, kernel row, kernel col, in channel.
pub fn conv(x: &[f64], (h, w, cin): (usize, usize, usize), k: &[f64], (kh, kw, cout): (usize, usize, usize), b: &[f64], stride: usize) -> Vec<f64> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let mut acc = b[o];
                for u in 0..kh {
                    for v in 0..kw {
                        for ci in 0..cin {
                            acc += at3(x, w, cin, i * stride + u, j * stride + v, ci) * k[((u * kw + v) * cin + ci) * cout + o];
                        }
                    }
                }
                out[(i * ow + j) * cout + o] = acc;
            }
        }
    }
    out
}

/// Average over rows `[floor(i·H/S), ceil((i+1)·H/S))` and likewise columns.
pub fn pool(x: &[f64], h: usize, c: usize, s: usize) -> Vec<f64> {
    let start = |i: usize| i * h / s;
    let end = |i: usize| ((i + 1) * h).div_ceil(s);
    let mut out = Vec::new();
    for i in 0..s {
        for j in 0..s {
            for ch in 0..c {
                let mut acc = 0.0;
                let mut n = 0.0;
                for r in start(i)..end(i) {
                    for q in start(j)..end(j) {
                        acc += at3(x, h, c, r, q, ch);
                        n += 1.0;
                    }
                }
                out.push(acc / n);
            }
        }
    }
    out
}

pub fn crop(x: &[f64], h: usize, c: usize, s: usize) -> Vec<f64> {
    let m = (h - s) / 2;
    let mut out = Vec::new();
    for r in m..m + s {
        for q in m..m + s {
            for ch in 0..c {
                out.push(at3(x, h, c, r, q, ch));
            }
        }
    }
    out
}

pub fn matmul(a: &[f64], (n, k): (usize, usize), b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}

pub fn linear(x: &[f64], (n, k): (usize, usize), w: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut y = matmul(x, (n, k), w, m);
    for (i, v) in y.iter_mut().enumerate() {
        *v += b[i % m];
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for row in x.chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mu) / (var + eps).sqrt() * gamma[i] + beta[i]));
    }
    out
}

pub fn softmax(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in x.chunks(m) {
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        out.extend(row.iter().map(|v| (v - mx).exp() / z));
    }
    out
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp(x: &[f64], (n, din): (usize, usize), w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], dout: usize) -> Vec<f64> {
    let hidden = b1.len();
    let h: Vec<f64> = linear(x, (n, din), w1, hidden, b1).into_iter().map(gelu).collect();
    linear(&h, (n, hidden), w2, dout, b2)
}
