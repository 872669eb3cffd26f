//! Reverse-mode differentiation over the primitive kernels in `ops`.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Composite
//! layers never define their own adjoints; they are built from these
//! primitives.

use std::sync::Arc;

use super::ops::{self, LayerNormCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, kernel: Var, bias: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of the gradient for `v`, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a learnable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    pub fn conv2d_3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::conv2d_3x3(self.value(x), self.value(kernel), self.value(bias))?;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(y, Op::Conv2d { x, kernel, bias }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x), mask.as_deref())?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Softmax { x }, rg))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            ops::layernorm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, cache }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = ops::exp(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Exp(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(y, Op::AddScalar(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat(&values, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_last_axis(&mut self, a: Var, b: Var) -> Result<Var> {
        let axis = self.value(a).rank() - 1;
        self.concat(&[a, b], axis)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(axes)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut axes: Vec<usize> = (0..rank).collect();
        if rank >= 2 {
            axes.swap(rank - 2, rank - 1);
        }
        self.permute(x, &axes)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Narrow { x, axis, start }, rg))
    }

    /// Picks index `i` along `axis` and drops that axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let n = self.narrow(x, axis, i, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(n, &shape)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a one-element `loss`. Every leaf recorded with
    /// [`Tape::param`] gets a gradient of its own shape (zeros when the loss
    /// does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            for (input, g) in self.adjoint(node, &dy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], g);
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    res.push((*a, ops::matmul(dy, &bv.transpose()?)?));
                }
                if self.nodes[b.0].requires_grad {
                    let db = if bv.rank() == 2 && av.rank() > 2 {
                        let k = av.shape()[av.rank() - 1];
                        let n = dy.shape()[dy.rank() - 1];
                        let a2 = av.reshape(&[av.numel() / k, k])?;
                        let g2 = dy.reshape(&[dy.numel() / n, n])?;
                        ops::matmul(&a2.transpose()?, &g2)?
                    } else {
                        ops::matmul(&av.transpose()?, dy)?
                    };
                    res.push((*b, db));
                }
                res
            }
            Op::Conv2d { x, kernel, bias } => {
                let (dx, dk, db) = ops::conv2d_3x3_backward(val(*x), val(*kernel), val(*bias), dy)?;
                vec![(*x, dx), (*kernel, dk), (*bias, db)]
            }
            Op::Softmax { x } => {
                let n = y.shape()[y.rank() - 1];
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.numel() / n {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &dy.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let d = y.shape()[y.rank() - 1];
                let rows = y.numel() / d;
                let g = val(*gamma).data();
                let xhat = cache.normalized.data();
                let mut dx = vec![0.0; y.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &dy.data()[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * g[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xr[j];
                    }
                    let scale = cache.inv_std[r] / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = scale * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(y.shape().to_vec(), dx)),
                    (*gamma, Tensor::from_parts(vec![d], dgamma)),
                    (*beta, Tensor::from_parts(vec![d], dbeta)),
                ]
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Op::Sigmoid(x) => {
                let dx = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::Exp(x) => vec![(*x, ops::mul(dy, y)?)],
            Op::Add(a, b) => vec![
                (*a, ops::sum_to_shape(dy, val(*a).shape())),
                (*b, ops::sum_to_shape(dy, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, ops::sum_to_shape(dy, val(*a).shape())),
                (*b, ops::sum_to_shape(&dy.map(|g| -g), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    res.push((*a, ops::sum_to_shape(&ops::mul(dy, val(*b))?, val(*a).shape())));
                }
                if self.nodes[b.0].requires_grad {
                    res.push((*b, ops::sum_to_shape(&ops::mul(dy, val(*a))?, val(*b).shape())));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, dy.map(|g| g * c))],
            Op::AddScalar(x) => vec![(*x, dy.clone())],
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    res.push((*p, dy.narrow(*axis, start, len)?));
                    start += len;
                }
                res
            }
            Op::Reshape(x) => vec![(*x, dy.reshape(val(*x).shape())?)],
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, dy.permute(&inverse)?)]
            }
            Op::Narrow { x, axis, start } => {
                let xv = val(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let inner: usize = xv.shape()[axis + 1..].iter().product();
                let extent = xv.shape()[*axis];
                let len = dy.shape()[*axis];
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let src = &dy.data()[o * len * inner..(o + 1) * len * inner];
                    let base = (o * extent + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), dy.item()))],
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(existing) => {
            debug_assert_eq!(existing.shape(), g.shape());
            let sum: Vec<f64> = existing
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a + b)
                .collect();
            *existing = Tensor::from_parts(g.shape().to_vec(), sum);
        }
    }
}
