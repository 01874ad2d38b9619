//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the adjoint. Node indices are a topological order, so `backward`
//! walks the tape from the end.

use super::kernels::{self, axis_extents, Broadcast};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of an op defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order. `None` skips the input.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

/// Everything a [`CustomOp`] may read during the backward pass.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub needs_grad: Vec<bool>,
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf node excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by [`Graph::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Appends an op whose adjoint is supplied by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, rg, Op::Custom { inputs, op })
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(name, sa, sb)?;
        let ba = Broadcast::new(&out_shape, sa);
        let bb = Broadcast::new(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let data = match (&ba, &bb) {
            (Broadcast::Same, Broadcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..numel).map(|i| f(da[ba.index(i)], db[bb.index(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(out_shape, data)?, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e + c).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::AddScalar(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape");
        (t, self.rg(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let (t, rg) = self.unary(x, f64::sqrt);
        Ok(self.push(t, rg, Op::Sqrt(x)))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let (t, rg) = self.unary(x, f64::ln);
        Ok(self.push(t, rg, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (t, rg) = self.unary(x, f64::exp);
        self.push(t, rg, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (t, rg) = self.unary(x, kernels::gelu);
        self.push(t, rg, Op::Gelu(x))
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading batch axes must either match exactly or be absent on one
    /// side, in which case that operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatmulDims::new(&sa, &sb)?;
        let mut out = vec![0.0; dims.out_numel()];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        dims.forward(da, db, &mut out);
        let t = Tensor::new(dims.out_shape(&sa, &sb), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), shape, axes);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Contract("transpose_last needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::MeanAll(x))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SumAxis { x, axis }))
    }

    /// Max-stabilised softmax along `axis`.
    ///
    /// `-inf` entries receive exactly zero probability. A slice where every
    /// entry is `-inf` yields all zeros (used for padding rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    /// Normalises over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table; the output is `shape + [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: ts,
                rhs: shape.to_vec(),
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary { id, size: vocab });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(dim);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood over rows of `[rows, classes]` logits.
    ///
    /// Rows whose target equals `ignore_index` contribute nothing. When every
    /// row is ignored the loss is defined as 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let classes = shape[1];
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= classes {
                return Err(Error::Vocabulary { id: t, size: classes });
            }
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            loss += lse - row[t];
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
        ))
    }

    /// Reverse pass from a scalar node. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let contributions = self.adjoint(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let sa = self.shape(*a);
                    res.push((*a, Broadcast::new(out_shape, sa).reduce(g, self.value(*a).numel())));
                }
                if self.rg(*b) {
                    let sb = self.shape(*b);
                    let mut gb = Broadcast::new(out_shape, sb).reduce(g, self.value(*b).numel());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ba = Broadcast::new(out_shape, va.shape());
                let bb = Broadcast::new(out_shape, vb.shape());
                if self.rg(*a) {
                    let mut ga = vec![0.0; va.numel()];
                    for (k, gk) in g.iter().enumerate() {
                        ga[ba.index(k)] += gk * vb.data()[bb.index(k)];
                    }
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; vb.numel()];
                    for (k, gk) in g.iter().enumerate() {
                        gb[bb.index(k)] += gk * va.data()[ba.index(k)];
                    }
                    res.push((*b, gb));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Sqrt(x) => {
                let y = node.value.data();
                res.push((*x, g.iter().zip(y).map(|(gk, yk)| gk * 0.5 / yk).collect()));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(gk, xk)| gk / xk).collect()));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                res.push((*x, g.iter().zip(y).map(|(gk, yk)| gk * yk).collect()));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(gk, &xk)| gk * kernels::gelu_grad(xk)).collect()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let dims = MatmulDims::new(va.shape(), vb.shape()).expect("validated in forward");
                let (ga, gb) = dims.backward(va.data(), vb.data(), g, self.rg(*a), self.rg(*b));
                if let Some(ga) = ga {
                    res.push((*a, ga));
                }
                if let Some(gb) = gb {
                    res.push((*b, gb));
                }
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (data, _) = kernels::permute(g, out_shape, &inverse);
                res.push((*x, data));
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, len, inner) = axis_extents(in_shape, *axis);
                let width = out_shape[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                res.push((*x, gx));
            }
            Op::SumAll(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::SumAxis { x, axis } => {
                let in_shape = self.shape(*x);
                let (outer, len, inner) = axis_extents(in_shape, *axis);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res.push((*x, gx));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(out_shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().expect("rank >= 1");
                let rows = g.len() / d;
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gx[r * d + j] = k * (d as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    res.push((*gamma, gg));
                }
                if self.rg(*beta) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    res.push((*beta, gb));
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] += g[k * dim + j];
                    }
                }
                res.push((*table, gt));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                let classes = self.shape(*logits)[1];
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for c in 0..classes {
                            gl[r * classes + c] = scale * probs[r * classes + c];
                        }
                        gl[r * classes + t] -= scale;
                    }
                }
                res.push((*logits, gl));
            }
            Op::Custom { inputs, op } => {
                let ctx = BackwardCtx {
                    inputs: inputs.iter().map(|&v| self.value(v)).collect(),
                    needs_grad: inputs.iter().map(|&v| self.rg(v)).collect(),
                    output: &node.value,
                    grad_output: g,
                };
                let grads = op.backward(&ctx);
                assert_eq!(grads.len(), inputs.len(), "{}: one gradient slot per input", op.name());
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        res.push((v, gv));
                    }
                }
            }
        }
        res
    }
}

/// Batch layout of a matmul.
struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatmulDims {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, n) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        if bb.is_empty() {
            // Shared right operand: fold the batch into the rows.
            let rows = ba.iter().product::<usize>() * m;
            return Ok(Self {
                m: rows,
                k,
                n,
                batch: 1,
                a_batched: false,
                b_batched: false,
            });
        }
        if ba.is_empty() {
            return Ok(Self {
                m,
                k,
                n,
                batch: bb.iter().product(),
                a_batched: false,
                b_batched: true,
            });
        }
        if ba != bb {
            return Err(err());
        }
        Ok(Self {
            m,
            k,
            n,
            batch: ba.iter().product(),
            a_batched: true,
            b_batched: true,
        })
    }

    fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn out_shape(&self, sa: &[usize], sb: &[usize]) -> Vec<usize> {
        let lead = if sa.len() > 2 { &sa[..sa.len() - 2] } else { &sb[..sb.len() - 2] };
        let mut s = lead.to_vec();
        s.push(sa[sa.len() - 2]);
        s.push(self.n);
        s
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let ao = if self.a_batched { bi * m * k } else { 0 };
            let bo = if self.b_batched { bi * k * n } else { 0 };
            kernels::gemm(m, k, n, &a[ao..ao + m * k], false, &b[bo..bo + k * n], false, &mut c[bi * m * n..(bi + 1) * m * n], false);
        }
    }

    fn backward(&self, a: &[f64], b: &[f64], g: &[f64], need_a: bool, need_b: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = need_a.then(|| vec![0.0; a.len()]);
        let mut gb = need_b.then(|| vec![0.0; b.len()]);
        for bi in 0..self.batch {
            let ao = if self.a_batched { bi * m * k } else { 0 };
            let bo = if self.b_batched { bi * k * n } else { 0 };
            let gc = &g[bi * m * n..(bi + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                // dA = dC · Bᵀ
                kernels::gemm(m, n, k, gc, false, &b[bo..bo + k * n], true, &mut ga[ao..ao + m * k], self.a_batched || bi > 0);
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · dC
                kernels::gemm(k, m, n, &a[ao..ao + m * k], true, gc, false, &mut gb[bo..bo + k * n], self.b_batched || bi > 0);
            }
        }
        (ga, gb)
    }
}
