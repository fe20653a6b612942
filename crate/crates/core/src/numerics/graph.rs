//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the chain rule.

use std::collections::HashMap;

use rand::Rng as _;

use super::params::{ParamId, ParamStore};
use super::tensor::{
    self, axis_split, dot, gelu_grad_scalar, gelu_scalar, matmul_grad_a, matmul_grad_b,
    matmul_into, normalize_row, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Gather { table: Var, rows: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        effective: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Dropout { x: Var, keep: Vec<f64> },
}

/// Batch layout of a packed `[batch·len × d]` sequence tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.frozen {
            self.push(p.value.clone(), Op::Leaf, false)
        } else {
            self.push(p.value.clone(), Op::Param, true)
        };
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ([m, k], [k2, n]) = (sa, sb) else {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        };
        if k != k2 {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (*m, *k, *n);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("elementwise {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[.., n] + bias[n]`, broadcast over all leading axes.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.value(bias).numel() != n {
            return shape_err(format!("bias {:?} for {:?}", self.shape(bias), self.shape(a)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[m, n] = self.shape(x) else {
            return shape_err(format!("transpose of {:?}", self.shape(x)));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&values, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean over `axis`, which is removed from the shape (rank-1 inputs give
    /// a one-element tensor).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("mean axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Rows of a `[n × d]` table, in the given order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let &[n, d] = self.shape(table) else {
            return shape_err(format!("gather from {:?}", self.shape(table)));
        };
        if rows.is_empty() {
            return Err(Error::Empty("gather of zero rows"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::TokenOutOfRange { id: r, size: n });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = tensor::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return shape_err(format!(
                "layer_norm width {d}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.numel() / d;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks(d) {
            let (h, s) = normalize_row(row, eps);
            out.extend(h.iter().enumerate().map(|(j, &v)| v * g[j] + b[j]));
            xhat.extend(h);
            inv_std.push(s);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[batch × classes]` logits. A label equal to
    /// `classes` is the out-of-vocabulary sentinel: the row is skipped and
    /// does not count towards the mean.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[batch, classes] = self.shape(logits) else {
            return shape_err(format!("cross_entropy logits {:?}", self.shape(logits)));
        };
        if labels.len() != batch {
            return shape_err(format!("{} labels for batch {batch}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > classes) {
            return shape_err(format!("label {bad} for {classes} classes"));
        }
        let effective = labels.iter().filter(|&&l| l < classes).count();
        if effective == 0 {
            return Err(Error::EmptyBatch);
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label == classes {
                continue;
            }
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / effective as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                effective,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch·len × d]`; `mask[s·len + j]` false removes
    /// key `j` of sequence `s` from every softmax (weight exactly zero).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        layout: AttentionLayout,
    ) -> Result<Var> {
        let AttentionLayout { batch, len, heads } = layout;
        let shape = self.shape(q).to_vec();
        let &[rows, d] = &shape[..] else {
            return shape_err(format!("attention input {shape:?}"));
        };
        if rows != batch * len
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
            || mask.len() != rows
            || heads == 0
            || d % heads != 0
        {
            return shape_err(format!(
                "attention q {shape:?} k {:?} v {:?} mask {} layout {layout:?}",
                self.shape(k),
                self.shape(v),
                mask.len()
            ));
        }
        for s in 0..batch {
            if !mask[s * len..(s + 1) * len].iter().any(|&m| m) {
                return Err(Error::Shape(format!("sequence {s} is fully masked")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; len];
        for s in 0..batch {
            let base = s * len;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    let qi = &qd[(base + i) * d + col..(base + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if mask[base + j] {
                            let kj = &kd[(base + j) * d + col..(base + j) * d + col + dh];
                            scores[j] = dot(qi, kj) * scale;
                            max = max.max(scores[j]);
                        }
                    }
                    let p = &mut probs[((s * heads + h) * len + i) * len..][..len];
                    let mut sum = 0.0;
                    for j in 0..len {
                        if mask[base + j] {
                            p[j] = (scores[j] - max).exp();
                            sum += p[j];
                        }
                    }
                    let o = &mut out[(base + i) * d + col..(base + i) * d + col + dh];
                    for j in 0..len {
                        if mask[base + j] {
                            p[j] /= sum;
                            let vj = &vd[(base + j) * d + col..(base + j) * d + col + dh];
                            for (oc, &vc) in o.iter_mut().zip(vj) {
                                *oc += p[j] * vc;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                layout,
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Attention weights `[batch × heads × len × len]` recorded by an
    /// [`Graph::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Tensor::new(
                vec![layout.batch, layout.heads, layout.len, layout.len],
                probs.clone(),
            )
            .ok(),
            _ => None,
        }
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep_scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().zip(&keep).map(|(a, b)| a * b).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, keep }, rg)
    }

    /// Gradient of `var` after [`Graph::backward`]; `None` when no gradient
    /// reached it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Back-propagate from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &self.nodes[v.0];
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot, &node.value);
    }

    fn acc_slice(&mut self, v: Var, g: &[f64]) {
        self.acc(v, |dst, _| {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        });
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // the op is moved out to sidestep borrowing the node list while
        // accumulating into its inputs
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let &[m, k] = self.shape(a) else { unreachable!() };
                let n = self.shape(b)[1];
                let bv = self.value(b).data().to_vec();
                self.acc(a, |da, _| matmul_grad_a(g, &bv, da, m, k, n));
                let av = self.value(a).data().to_vec();
                self.acc(b, |db, _| matmul_grad_b(&av, g, db, m, k, n));
            }
            &Op::Add(a, b) => {
                self.acc_slice(a, g);
                self.acc_slice(b, g);
            }
            &Op::Sub(a, b) => {
                self.acc_slice(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc_slice(b, &neg);
            }
            &Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.acc(a, |da, _| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.acc(b, |db, _| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddBias(a, bias) => {
                self.acc_slice(a, g);
                self.acc(bias, |db, _| {
                    let n = db.len();
                    for row in g.chunks(n) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
            &Op::Scale(x, s) => {
                self.acc(x, |dx, _| {
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += s * gi;
                    }
                });
            }
            &Op::Relu(x) => self.acc(x, |dx, xv| {
                for ((d, gi), &xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }),
            &Op::Gelu(x) => self.acc(x, |dx, xv| {
                for ((d, gi), &xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *d += gi * gelu_grad_scalar(xi);
                }
            }),
            &Op::Tanh(x) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(x, |dx, _| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Reshape(x) => self.acc_slice(x, g),
            &Op::Transpose(x) => {
                let &[m, n] = self.shape(x) else { unreachable!() };
                self.acc(x, |dx, _| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.acc(p, |dp, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (d, s) in dp[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Mean { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, n, inner) = axis_split(&shape, axis);
                self.acc(x, |dx, _| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                dx[(o * n + j) * inner + i] += g[o * inner + i] / n as f64;
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => self.acc(x, |dx, _| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                self.acc(*table, |dt, _| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (dst, s) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *dst += s;
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = self.nodes[idx].value.data().to_vec();
                let (outer, n, inner) = axis_split(self.shape(x), axis);
                self.acc(x, |dx, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data().to_vec();
                let d = gv.len();
                self.acc(*gain, |dg, _| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(*bias, |db, _| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                });
                self.acc(*x, |dx, _| {
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                effective,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / *effective as f64;
                self.acc(*logits, |dl, _| {
                    for (r, &label) in labels.iter().enumerate() {
                        if label == classes {
                            continue;
                        }
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                mask,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *layout, mask, probs, g);
                self.acc_slice(*q, &dq);
                self.acc_slice(*k, &dk);
                self.acc_slice(*v, &dv);
            }
            Op::Dropout { x, keep } => self.acc(*x, |dx, _| {
                for ((d, gi), k) in dx.iter_mut().zip(g).zip(keep) {
                    *d += gi * k;
                }
            }),
        }
        self.nodes[idx].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        mask: &[bool],
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let AttentionLayout { batch, len, heads } = layout;
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; len];
        for s in 0..batch {
            let base = s * len;
            for h in 0..heads {
                let col = h * dh;
                let row = |i: usize| (base + i) * d + col;
                for i in 0..len {
                    let p = &probs[((s * heads + h) * len + i) * len..][..len];
                    let gi = &g[row(i)..row(i) + dh];
                    let mut weighted = 0.0;
                    for j in 0..len {
                        if mask[base + j] {
                            dp[j] = dot(gi, &vd[row(j)..row(j) + dh]);
                            weighted += p[j] * dp[j];
                            for (dvc, &gc) in dv[row(j)..row(j) + dh].iter_mut().zip(gi) {
                                *dvc += p[j] * gc;
                            }
                        }
                    }
                    for j in 0..len {
                        if !mask[base + j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[row(i) + c] += ds * kd[row(j) + c];
                            dk[row(j) + c] += ds * qd[row(i) + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    /// Add the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &var) in &self.params {
            if let Some(g) = self.grad(var) {
                store.accumulate_grad(id, g);
            }
        }
    }
}
