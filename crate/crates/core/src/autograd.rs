//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so node order
//! is a topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Elementwise operations broadcast over leading axes only: the shape of the
//! smaller operand must be a suffix of the larger one.

use crate::error::{Error, Result};
use crate::tensor::{inverse_permutation, numel, permute_data, split_at_axis, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the differentiable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the reset are invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    // ----------------------------------------------------------------- matmul

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Leading batch axes must either match, or be absent on one side (that
    /// operand is then shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(self.data(a), self.data(b), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(plan.out_shape.clone(), out), Op::MatMul(a, b), rg))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(op_name, sa, sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        if da.len() == db.len() {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else if da.len() > db.len() {
            for chunk in da.chunks(db.len().max(1)) {
                out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for chunk in db.chunks(da.len().max(1)) {
                out.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF from `erf`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_value, Op::Gelu(x))
    }

    // ---------------------------------------------------------- normalization

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let data = self.data(x);
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis followed by `gain * . + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if n < 2 {
            return Err(Error::invalid("layer_norm", "last axis must have extent >= 2"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        for p in [gain, shift] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let (data, g, s) = (self.data(x), self.data(gain), self.data(shift));
        let rows = data.len() / n;
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + s[j];
            }
        }
        let rg = self.any_grad(&[x, gain, shift]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------ shape

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, out) = permute_data(self.data(x), shape, axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::invalid("transpose", "rank must be >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&data[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, rg))
    }

    /// Expands to `target`, aligning shapes on the right. Each input axis must
    /// be 1 or equal to the target extent; missing leading axes are created.
    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let src = broadcast_strides(self.shape(x), target)
            .ok_or_else(|| Error::shape("broadcast_to", self.shape(x), target))?;
        let out = gather_strided(self.data(x), target, &src);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(target.to_vec(), out), Op::BroadcastTo(x), rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let data = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // --------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every differentiable leaf reachable from the
    /// loss. The tape itself is left intact; call [`Tape::reset`] to reuse it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut acc = Accumulator {
            tape: self,
            grads: (0..=loss.0).map(|_| None).collect(),
        };
        acc.grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = acc.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::MatMul(a, b) => {
                    let plan = MatmulPlan::new(self.shape(*a), self.shape(*b))
                        .expect("shapes were validated in the forward pass");
                    if acc.wants(*a) {
                        let mut ga = vec![0.0; self.value(*a).len()];
                        plan.grad_lhs(&g, self.data(*b), &mut ga);
                        acc.add(*a, ga);
                    }
                    if acc.wants(*b) {
                        let mut gb = vec![0.0; self.value(*b).len()];
                        plan.grad_rhs(self.data(*a), &g, &mut gb);
                        acc.add(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc.add_reduced(*a, &g);
                    acc.add_reduced(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add_reduced(*a, &g);
                    if acc.wants(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        acc.add_reduced(*b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if acc.wants(*a) {
                        let other = self.data(*b);
                        let ga = zip_broadcast(&g, other, |gi, bi| gi * bi);
                        acc.add_reduced(*a, &ga);
                    }
                    if acc.wants(*b) {
                        let other = self.data(*a);
                        let gb = zip_broadcast(&g, other, |gi, ai| gi * ai);
                        acc.add_reduced(*b, &gb);
                    }
                }
                Op::Div(a, b) => {
                    let bd = self.data(*b);
                    if acc.wants(*a) {
                        let ga = zip_broadcast(&g, bd, |gi, bi| gi / bi);
                        acc.add_reduced(*a, &ga);
                    }
                    if acc.wants(*b) {
                        // d(a/b)/db = -y / b, with y the forward output.
                        let gy: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                        let gb = zip_broadcast(&gy, bd, |v, bi| -v / bi);
                        acc.add_reduced(*b, &gb);
                    }
                }
                Op::Scale(x, c) => acc.add(*x, g.iter().map(|v| v * c).collect()),
                Op::Offset(x) | Op::Reshape(x) => acc.add(*x, g),
                Op::Exp(x) => acc.add(*x, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()),
                Op::Log(x) => {
                    let xd = self.data(*x);
                    acc.add(*x, g.iter().zip(xd).map(|(gi, xi)| gi / xi).collect());
                }
                Op::Sqrt(x) => acc.add(*x, g.iter().zip(y).map(|(gi, yi)| gi * 0.5 / yi).collect()),
                Op::Gelu(x) => {
                    let xd = self.data(*x);
                    acc.add(*x, g.iter().zip(xd).map(|(gi, &xi)| gi * gelu_grad(xi)).collect());
                }
                Op::Softmax { x, axis } => {
                    let (outer, n, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..n {
                                let k = base + j * inner;
                                gx[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                    acc.add(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let n = self.shape(*gain)[0];
                    let gd = self.data(*gain);
                    if acc.wants(*gain) {
                        let mut gg = vec![0.0; n];
                        for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                        acc.add(*gain, gg);
                    }
                    if acc.wants(*shift) {
                        let mut gs = vec![0.0; n];
                        for row_g in g.chunks(n) {
                            for j in 0..n {
                                gs[j] += row_g[j];
                            }
                        }
                        acc.add(*shift, gs);
                    }
                    if acc.wants(*x) {
                        let mut gx = vec![0.0; g.len()];
                        let nf = n as f64;
                        for (r, inv) in inv_std.iter().enumerate() {
                            let rg = &g[r * n..(r + 1) * n];
                            let rh = &xhat[r * n..(r + 1) * n];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..n {
                                let d = rg[j] * gd[j];
                                sum_d += d;
                                sum_dh += d * rh[j];
                            }
                            for j in 0..n {
                                let d = rg[j] * gd[j];
                                gx[r * n + j] = inv / nf * (nf * d - sum_d - rh[j] * sum_dh);
                            }
                        }
                        acc.add(*x, gx);
                    }
                }
                Op::Permute { x, axes } => {
                    let (_, gx) = permute_data(&g, node.value.shape(), &inverse_permutation(axes));
                    acc.add(*x, gx);
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let (outer, _, inner) = split_at_axis(out_shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let extent = self.shape(p)[*axis];
                        if acc.wants(p) {
                            let block = extent * inner;
                            let row = out_shape[*axis] * inner;
                            let mut gp = Vec::with_capacity(outer * block);
                            for o in 0..outer {
                                let from = o * row + offset * inner;
                                gp.extend_from_slice(&g[from..from + block]);
                            }
                            acc.add(p, gp);
                        }
                        offset += extent;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let in_shape = self.shape(*x);
                    let (outer, n, inner) = split_at_axis(in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; numel(in_shape)];
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let from = o * len * inner;
                        gx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                    }
                    acc.add(*x, gx);
                }
                Op::BroadcastTo(x) => {
                    let in_shape = self.shape(*x);
                    let src = broadcast_strides(in_shape, node.value.shape()).expect("validated in forward");
                    let mut gx = vec![0.0; numel(in_shape)];
                    scatter_add_strided(&g, node.value.shape(), &src, &mut gx);
                    acc.add(*x, gx);
                }
                Op::SumAxis { x, axis } => {
                    let in_shape = self.shape(*x);
                    let (outer, n, inner) = split_at_axis(in_shape, *axis);
                    let mut gx = Vec::with_capacity(numel(in_shape));
                    for o in 0..outer {
                        for _ in 0..n {
                            gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc.add(*x, gx);
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    acc.add(*x, vec![g[0]; n]);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

struct Accumulator<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Accumulator<'_> {
    fn wants(&self, var: Var) -> bool {
        self.tape.nodes[var.0].requires_grad
    }

    fn add(&mut self, var: Var, contribution: Vec<f64>) {
        if !self.wants(var) {
            return;
        }
        match &mut self.grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adds a full-size contribution, summing over leading broadcast repeats
    /// when `var` is the smaller operand.
    fn add_reduced(&mut self, var: Var, full: &[f64]) {
        if !self.wants(var) {
            return;
        }
        let n = self.tape.value(var).len();
        if n == full.len() {
            self.add(var, full.to_vec());
            return;
        }
        let mut reduced = vec![0.0; n];
        for chunk in full.chunks(n) {
            for (r, c) in reduced.iter_mut().zip(chunk) {
                *r += c;
            }
        }
        self.add(var, reduced);
    }
}

/// Applies `f(big[i], small[i mod small.len()])`.
fn zip_broadcast(big: &[f64], small: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if big.len() == small.len() {
        return big.iter().zip(small).map(|(&a, &b)| f(a, b)).collect();
    }
    if small.len() > big.len() {
        // `big` is the broadcast operand's gradient source; the output
        // gradient is always full size, so this only happens for the
        // operand's own data being larger, i.e. never for valid graphs.
        unreachable!("gradient smaller than operand");
    }
    let mut out = Vec::with_capacity(big.len());
    for chunk in big.chunks(small.len()) {
        out.extend(chunk.iter().zip(small).map(|(&a, &b)| f(a, b)));
    }
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let offset = target.len() - src.len();
    let src_strides = strides(src);
    let mut out = vec![0; target.len()];
    for (i, (&s, &st)) in src.iter().zip(&src_strides).enumerate() {
        let t = target[offset + i];
        if s == t {
            out[offset + i] = st;
        } else if s != 1 {
            return None;
        }
    }
    Some(out)
}

fn for_each_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..n {
        f(out, src);
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            counter[axis] += 1;
            src += src_strides[axis];
            if counter[axis] < shape[axis] {
                break;
            }
            src -= src_strides[axis] * shape[axis];
            counter[axis] = 0;
        }
    }
}

fn gather_strided(data: &[f64], shape: &[usize], src_strides: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(shape)];
    for_each_strided(shape, src_strides, |o, s| out[o] = data[s]);
    out
}

fn scatter_add_strided(g: &[f64], shape: &[usize], src_strides: &[usize], into: &mut [f64]) {
    for_each_strided(shape, src_strides, |o, s| into[s] += g[o]);
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

// ----------------------------------------------------------------------- gemm

#[derive(Debug)]
enum BatchMode {
    /// Rhs is a plain matrix; lhs batch axes fold into its row count.
    SharedRhs,
    /// Lhs is a plain matrix shared across the rhs batch.
    SharedLhs,
    Paired,
}

#[derive(Debug)]
struct MatmulPlan {
    mode: BatchMode,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (a_lead, a_mat) = a.split_at(a.len() - 2);
        let (b_lead, b_mat) = b.split_at(b.len() - 2);
        let (m, k, k2, n) = (a_mat[0], a_mat[1], b_mat[0], b_mat[1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (mode, lead) = if b_lead.is_empty() {
            (BatchMode::SharedRhs, a_lead)
        } else if a_lead.is_empty() {
            (BatchMode::SharedLhs, b_lead)
        } else if a_lead == b_lead {
            (BatchMode::Paired, a_lead)
        } else {
            return Err(Error::shape("matmul", a, b));
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            mode,
            batch: numel(lead),
            m,
            k,
            n,
            out_shape,
        })
    }

    fn out_len(&self) -> usize {
        numel(&self.out_shape)
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match self.mode {
            BatchMode::SharedRhs => gemm(self.batch * m, k, n, a, false, b, false, c),
            BatchMode::SharedLhs => {
                for i in 0..self.batch {
                    gemm(m, k, n, a, false, &b[i * k * n..(i + 1) * k * n], false, &mut c[i * m * n..(i + 1) * m * n]);
                }
            }
            BatchMode::Paired => {
                for i in 0..self.batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        false,
                        &b[i * k * n..(i + 1) * k * n],
                        false,
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
    }

    /// dA = dC . B^T
    fn grad_lhs(&self, gc: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match self.mode {
            BatchMode::SharedRhs => gemm(self.batch * m, n, k, gc, false, b, true, ga),
            BatchMode::SharedLhs => {
                for i in 0..self.batch {
                    gemm_acc(m, n, k, &gc[i * m * n..(i + 1) * m * n], false, &b[i * k * n..(i + 1) * k * n], true, ga);
                }
            }
            BatchMode::Paired => {
                for i in 0..self.batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gc[i * m * n..(i + 1) * m * n],
                        false,
                        &b[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
        }
    }

    /// dB = A^T . dC
    fn grad_rhs(&self, a: &[f64], gc: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match self.mode {
            BatchMode::SharedRhs => gemm(k, self.batch * m, n, a, true, gc, false, gb),
            BatchMode::SharedLhs => {
                for i in 0..self.batch {
                    gemm(k, m, n, a, true, &gc[i * m * n..(i + 1) * m * n], false, &mut gb[i * k * n..(i + 1) * k * n]);
                }
            }
            BatchMode::Paired => {
                for i in 0..self.batch {
                    gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..(i + 1) * m * k],
                        true,
                        &gc[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
    }
}

/// `c = op(a) . op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    gemm_impl(m, k, n, a, a_t, b, b_t, c, 0.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    gemm_impl(m, k, n, a, a_t, b, b_t, c, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_impl(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every strided access stays
    // within the slices: a is m*k, b is k*n and c is m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
