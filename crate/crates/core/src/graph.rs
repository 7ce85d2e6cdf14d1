//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! deterministic topological order and backward simply walks it in reverse.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    AdaptivePool {
        input: Var,
        out: usize,
    },
    Crop {
        input: Var,
        row: usize,
        col: usize,
    },
    Reshape {
        input: Var,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gelu {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
///
/// Trainable leaves are registered by name; [`Graph::backward`] returns a
/// gradient for each of them, zero-filled when the loss does not depend on it.
#[derive(Debug)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(TensorError::arg(
                "param",
                format!("parameter `{name}` registered twice"),
            ));
        }
        let var = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Records a constant leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(var.0))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d_valid(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let b = bias.map(|b| self.check(b)).transpose()?;
        let value = ops::conv2d_valid(self.check(input)?, self.check(kernel)?, b, stride)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn adaptive_avg_pool2d(&mut self, input: Var, out: usize) -> Result<Var> {
        let value = ops::adaptive_avg_pool2d(self.check(input)?, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::AdaptivePool { input, out }, rg))
    }

    pub fn crop(&mut self, input: Var, row: usize, col: usize, size: usize) -> Result<Var> {
        let value = ops::crop(self.check(input)?, row, col, size)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Crop { input, row, col }, rg))
    }

    pub fn center_crop(&mut self, input: Var, size: usize) -> Result<Var> {
        let (row, col) = ops::center_crop_offsets(self.check(input)?.shape(), size)?;
        self.crop(input, row, col, size)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(input)?.reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let b = bias.map(|b| self.check(b)).transpose()?;
        let value = ops::linear(self.check(x)?, self.check(weight)?, b)?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Linear { x, weight, bias }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.check(a)?, self.check(b)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.check(a)?, self.check(b)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt { a, b }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, rstd) =
            ops::layer_norm_stats(self.check(x)?, self.check(gamma)?, self.check(beta)?, eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_rows(self.check(x)?)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let value = ops::concat(&tensors, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = ops::gelu(self.check(x)?)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gelu { x }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let value = self.check(x)?.map(|v| v * factor);
        value.ensure_finite("scale")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_map("add", self.check(a)?, self.check(b)?, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_map("sub", self.check(a)?, self.check(b)?, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::zip_map("mul", self.check(a)?, self.check(b)?, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.check(x)?.sum());
        value.ensure_finite("sum")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let value = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        value.ensure_finite("mean")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Mean { x }, rg))
    }

    /// Mean squared difference between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.check(loss)?;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(
            loss_value.shape().to_vec(),
            vec![T::one()],
        ));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let by_param = self
            .params
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(var.0)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| zeros_like(&self.nodes[var.0].value));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_param })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (gi, gk, gb) =
                    ops::conv2d_valid_backward(val(input), val(kernel), stride, g, needs(input))?;
                if let Some(gi) = gi {
                    accumulate(grads, input, gi);
                }
                if needs(kernel) {
                    accumulate(grads, kernel, gk);
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    accumulate(grads, b, gb);
                }
            }
            &Op::AdaptivePool { input, out } => {
                let gi = ops::adaptive_avg_pool2d_backward(val(input).shape(), out, g);
                accumulate(grads, input, gi);
            }
            &Op::Crop { input, row, col } => {
                let gi = ops::crop_backward(val(input).shape(), row, col, g);
                accumulate(grads, input, gi);
            }
            &Op::Reshape { input } => {
                accumulate(grads, input, g.reshape(val(input).shape())?);
            }
            &Op::Linear { x, weight, bias } => {
                if needs(x) {
                    accumulate(grads, x, ops::matmul_nt(g, val(weight))?);
                }
                if needs(weight) {
                    accumulate(grads, weight, ops::matmul_tn(val(x), g)?);
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    accumulate(grads, b, ops::sum_rows(g));
                }
            }
            &Op::MatMul { a, b } => {
                if needs(a) {
                    accumulate(grads, a, ops::matmul_nt(g, val(b))?);
                }
                if needs(b) {
                    accumulate(grads, b, ops::matmul_tn(val(a), g)?);
                }
            }
            &Op::MatMulNt { a, b } => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if needs(a) {
                    accumulate(grads, a, ops::matmul(g, val(b))?);
                }
                if needs(b) {
                    accumulate(grads, b, ops::matmul_tn(g, val(a))?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let (gx, gg, gb) = ops::layer_norm_backward(val(*x), val(*gamma), rstd, g);
                if needs(*x) {
                    accumulate(grads, *x, gx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, gg);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, gb);
                }
            }
            &Op::Softmax { x } => {
                accumulate(grads, x, ops::softmax_rows_backward(&node.value, g));
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
                for (&p, gp) in parts.iter().zip(ops::concat_backward(&shapes, *axis, g)) {
                    if needs(p) {
                        accumulate(grads, p, gp);
                    }
                }
            }
            &Op::Gelu { x } => {
                accumulate(grads, x, ops::gelu_backward(val(x), g));
            }
            &Op::Scale { x, factor } => {
                accumulate(grads, x, g.map(|v| v * factor));
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    accumulate(grads, a, ops::zip_map("mul", g, val(b), |x, y| x * y)?);
                }
                if needs(b) {
                    accumulate(grads, b, ops::zip_map("mul", g, val(a), |x, y| x * y)?);
                }
            }
            &Op::Sum { x } => {
                let t = val(x);
                accumulate(grads, x, Tensor::from_parts(t.shape().to_vec(), vec![g.data()[0]; t.len()]));
            }
            &Op::Mean { x } => {
                let t = val(x);
                let v = g.data()[0] / T::from_f64(t.len() as f64);
                accumulate(grads, x, Tensor::from_parts(t.shape().to_vec(), vec![v; t.len()]));
            }
        }
        Ok(())
    }
}

fn zeros_like<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), vec![T::zero(); t.len()])
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    let slot = &mut grads[var.0];
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => {
            let data = prev.data().iter().zip(g.data()).map(|(&a, &b)| a + b).collect();
            Tensor::from_parts(prev.shape().to_vec(), data)
        }
    });
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_column_sum_of_input() {
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param("w", Tensor::zeros(&[4, 2]).unwrap()).unwrap();
        let y = g.linear(xv, w, None).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads.get("w").unwrap();
        for i in 0..4 {
            let col: f64 = (0..3).map(|r| x.get(&[r, i]).unwrap()).sum();
            for j in 0..2 {
                assert_eq!(gw.get(&[i, j]), Some(col));
            }
        }
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::ones(&[2]).unwrap()).unwrap();
        g.param("unused", Tensor::ones(&[3, 2]).unwrap()).unwrap();
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        let z = grads.get("unused").unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::ones(&[2]).unwrap()).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::<f32>::new();
        g.param("a", Tensor::ones(&[1]).unwrap()).unwrap();
        assert!(g.param("a", Tensor::ones(&[1]).unwrap()).is_err());
    }

    #[test]
    fn reused_value_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let sq = g.mul(a, a).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[6.0, -4.0]);
    }
}
