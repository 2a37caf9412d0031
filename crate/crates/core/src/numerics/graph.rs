//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order, so the backward pass is a
//! single reverse sweep. Parameters are leaves created with
//! [`Graph::param`]; constants never receive gradients.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::tensor::{gemm, gemm_strided, matmul_dims, permuted, Indices, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    Matmul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    AddPositionMatmul { base: Var, x: Var, table: Var, trans: bool },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, indices: Indices },
    Sum(Var),
    SmoothedCe {
        logits: Var,
        targets: Indices,
        smoothing: f64,
        ignore: Option<usize>,
        probs: Tensor,
        count: usize,
    },
    PairProject { x: Var, w: Var, edges: Option<Var> },
    PairDot { q: Var, keys: Var },
    PairWeightedSum { weights: Var, values: Var },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddSuffix(a, b) | Op::Mul(a, b) | Op::MulSuffix(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::MulConst(a, _) | Op::Relu(a) | Op::Reshape(a) | Op::Permute(a, _) => {
                vec![*a]
            }
            Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::AddPositionMatmul { base, x, table, .. } => vec![*base, *x, *table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::SmoothedCe { logits, .. } => vec![*logits],
            Op::PairProject { x, w, edges } => {
                let mut p = vec![*x, *w];
                p.extend(edges);
                p
            }
            Op::PairDot { q, keys } => vec![*q, *keys],
            Op::PairWeightedSum { weights, values } => vec![*weights, *values],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants, intermediate results and anything created
    /// after the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

type Acc = Vec<Option<Vec<f64>>>;

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_param(&self, var: Var) -> bool {
        self.nodes[var.0].is_param
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds `b` to every trailing block of `a`; `b.shape` must be a suffix of
    /// `a.shape` (bias vectors, position tables).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = suffix_zip(self.value(a), self.value(b), "add_suffix", |x, y| x + y)?;
        Ok(self.push(v, Op::AddSuffix(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = suffix_zip(self.value(a), self.value(b), "mul_suffix", |x, y| x * y)?;
        Ok(self.push(v, Op::MulSuffix(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let v = self.value(a).zip_with(&mask, "mul_const", |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, mask)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b, trans_b: false }))
    }

    /// `a · bᵀ` over the trailing two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b, trans_b: true }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec())))
    }

    /// `base + y` where `y[.., .., i, :]` is the product of the rows
    /// `x[.., .., i, :]` with block `i` of `table`, computed one position at
    /// a time. `x` is `b×h×n×p`, `table` is `(groups·n)×r×s` with heads split
    /// evenly over the groups. Block `i` is used as `r×s = p×q`, or as its
    /// transpose when `trans` is set (`q×p`). `base` is `b×h×n×q`.
    pub fn add_position_matmul(&mut self, base: Var, x: Var, table: Var, trans: bool) -> Result<Var> {
        let (bv, xv, tv) = (self.value(base), self.value(x), self.value(table));
        let pm = PositionMatmul::new(xv.shape(), tv.shape(), trans)
            .filter(|pm| bv.shape() == pm.out_shape())
            .ok_or_else(|| Error::shape("add_position_matmul", xv.shape(), tv.shape()))?;
        let mut data = bv.to_vec();
        pm.forward(xv.data(), tv.data(), &mut data);
        let v = Tensor::from_parts(pm.out_shape().to_vec(), data);
        Ok(self.push(v, Op::AddPositionMatmul { base, x, table, trans }))
    }

    /// Softmax over the last axis. `mask` is an additive `0 / -inf` tensor
    /// whose shape is a suffix of the input shape.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let v = ops::softmax_rows(self.value(a), mask)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, normalized, inv_std) =
            ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &Indices) -> Result<Var> {
        let v = ops::gather_rows(self.value(table), indices)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                indices: indices.clone(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean label-smoothed cross-entropy over every position whose target is
    /// not `ignore`.
    pub fn label_smoothed_ce(
        &mut self,
        logits: Var,
        targets: &Indices,
        smoothing: f64,
        ignore: Option<usize>,
    ) -> Result<Var> {
        let parts = ops::smoothed_ce_parts(self.value(logits), targets, smoothing, ignore)?;
        Ok(self.push(
            Tensor::scalar(parts.loss),
            Op::SmoothedCe {
                logits,
                targets: targets.clone(),
                smoothing,
                ignore,
                probs: parts.probs,
                count: parts.count,
            },
        ))
    }

    /// Per-pair projection `out[b,h,i,j] = x[b,j]·w[h] + edges[g(h),i,j]`
    /// with shapes `x: b×n×d_x`, `w: h×d_x×d_z`, `edges: g×n×n×d_z` where
    /// `g` divides `h`. The projection is recomputed for every pair.
    pub fn pair_project(&mut self, x: Var, w: Var, edges: Option<Var>) -> Result<Var> {
        let v = ops::pair_project(self.value(x), self.value(w), edges.map(|e| self.value(e)))?;
        Ok(self.push(v, Op::PairProject { x, w, edges }))
    }

    /// `out[b,h,i,j] = Σ_c q[b,h,i,c] · keys[b,h,i,j,c]`.
    pub fn pair_dot(&mut self, q: Var, keys: Var) -> Result<Var> {
        let v = ops::pair_dot(self.value(q), self.value(keys))?;
        Ok(self.push(v, Op::PairDot { q, keys }))
    }

    /// `out[b,h,i,c] = Σ_j weights[b,h,i,j] · values[b,h,i,j,c]`.
    pub fn pair_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let v = ops::pair_weighted_sum(self.value(weights), self.value(values))?;
        Ok(self.push(v, Op::PairWeightedSum { weights, values }))
    }

    /// Backward pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::from_parts(shape.to_vec(), vec![1.0]);
        self.backward_from(loss, &seed)
    }

    /// Vector-Jacobian product: propagates `upstream` (shaped like `root`)
    /// back through the graph.
    pub fn backward_from(&self, root: Var, upstream: &Tensor) -> Result<Gradients> {
        if upstream.shape() != self.shape(root) {
            return Err(Error::shape("backward", upstream.shape(), self.shape(root)));
        }
        let mut acc: Acc = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            acc[root.0] = Some(upstream.to_vec());
        }
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = acc[idx].take() {
                self.propagate(idx, g, &mut acc);
            }
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if !node.requires_grad || i > root.0 || !matches!(node.op, Op::Leaf) {
                    return None;
                }
                let data = acc[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::from_parts(node.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, acc: &'a mut Acc, var: Var) -> Option<&'a mut [f64]> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            acc[var.0]
                .get_or_insert_with(|| vec![0.0; node.value.len()])
                .as_mut_slice(),
        )
    }

    /// Adds a whole contribution, taking ownership of it when the slot is
    /// still empty.
    fn deposit(&self, acc: &mut Acc, var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut acc[var.0] {
            Some(s) => s.iter_mut().zip(&contribution).for_each(|(s, c)| *s += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, owned: Vec<f64>, acc: &mut Acc) {
        let g = owned.as_slice();
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[b.0].requires_grad {
                    self.deposit(acc, *a, g.to_vec());
                    self.deposit(acc, *b, owned);
                } else {
                    self.deposit(acc, *a, owned);
                }
            }
            Op::AddSuffix(a, b) => {
                if let Some(s) = self.slot(acc, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(acc, *b) {
                    let len = s.len();
                    for chunk in g.chunks(len) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(acc, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(acc, *b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::MulSuffix(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let blen = bv.len();
                if let Some(s) = self.slot(acc, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i % blen];
                    }
                }
                if let Some(s) = self.slot(acc, *b) {
                    for i in 0..g.len() {
                        s[i % blen] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].requires_grad {
                    let mut scaled = owned;
                    scaled.iter_mut().for_each(|g| *g *= c);
                    self.deposit(acc, *a, scaled);
                }
            }
            Op::MulConst(a, m) => {
                if let Some(s) = self.slot(acc, *a) {
                    for ((s, g), m) in s.iter_mut().zip(g).zip(m.data()) {
                        *s += g * m;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(s) = self.slot(acc, *a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            Op::Matmul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, acc),
            Op::Reshape(a) => {
                if self.nodes[a.0].requires_grad {
                    self.deposit(acc, *a, owned);
                }
            }
            Op::Permute(a, axes) => {
                if self.nodes[a.0].requires_grad {
                    let back = permute_back(out.shape(), &owned, axes);
                    self.deposit(acc, *a, back);
                }
            }
            Op::AddPositionMatmul { base, x, table, trans } => {
                let (xv, tv) = (self.value(*x), self.value(*table));
                let pm = PositionMatmul::new(xv.shape(), tv.shape(), *trans).expect("validated in forward");
                if let Some(s) = self.slot(acc, *x) {
                    pm.backward_x(g, tv.data(), s);
                }
                if let Some(s) = self.slot(acc, *table) {
                    pm.backward_table(g, xv.data(), s);
                }
                self.deposit(acc, *base, owned);
            }
            Op::Softmax(a) => {
                if let Some(s) = self.slot(acc, *a) {
                    let n = *out.shape().last().unwrap_or(&1);
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let xhat = normalized.data();
                let gamma = self.value(*gain).data();
                if let Some(s) = self.slot(acc, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            s[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(s) = self.slot(acc, *bias) {
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                    }
                }
                if let Some(s) = self.slot(acc, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((srow, grow), hrow)) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dxhat[c] = grow[c] * gamma[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            srow[c] += inv_std[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                if let Some(s) = self.slot(acc, *table) {
                    let d = *out.shape().last().expect("gather output has a row axis");
                    for (grow, &row) in g.chunks(d).zip(indices.data()) {
                        s[row * d..(row + 1) * d]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(acc, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::SmoothedCe {
                logits,
                targets,
                smoothing,
                ignore,
                probs,
                count,
            } => {
                if let Some(s) = self.slot(acc, *logits) {
                    let v = *probs.shape().last().expect("logits have a class axis");
                    let off = smoothing / (v - 1) as f64;
                    let scale = g[0] / *count as f64;
                    for ((srow, prow), &t) in s.chunks_mut(v).zip(probs.data().chunks(v)).zip(targets.data()) {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for c in 0..v {
                            let q = if c == t { 1.0 - smoothing } else { off };
                            srow[c] += scale * (prow[c] - q);
                        }
                    }
                }
            }
            Op::PairProject { x, w, edges } => self.pair_project_backward(*x, *w, *edges, g, acc),
            Op::PairDot { q, keys } => {
                let (qv, kv) = (self.value(*q), self.value(*keys));
                let d = *qv.shape().last().unwrap();
                let n = kv.shape()[3];
                let rows = qv.len() / d;
                if let Some(s) = self.slot(acc, *q) {
                    for r in 0..rows {
                        for j in 0..n {
                            let gij = g[r * n + j];
                            let k = &kv.data()[(r * n + j) * d..(r * n + j + 1) * d];
                            for c in 0..d {
                                s[r * d + c] += gij * k[c];
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(acc, *keys) {
                    for r in 0..rows {
                        let qrow = &qv.data()[r * d..(r + 1) * d];
                        for j in 0..n {
                            let gij = g[r * n + j];
                            for c in 0..d {
                                s[(r * n + j) * d + c] += gij * qrow[c];
                            }
                        }
                    }
                }
            }
            Op::PairWeightedSum { weights, values } => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let n = *wv.shape().last().unwrap();
                let d = *vv.shape().last().unwrap();
                let rows = wv.len() / n;
                if let Some(s) = self.slot(acc, *weights) {
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        for j in 0..n {
                            let v = &vv.data()[(r * n + j) * d..(r * n + j + 1) * d];
                            s[r * n + j] += grow.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(s) = self.slot(acc, *values) {
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        for j in 0..n {
                            let a = wv.data()[r * n + j];
                            for c in 0..d {
                                s[(r * n + j) * d + c] += a * grow[c];
                            }
                        }
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, g: &[f64], acc: &mut Acc) {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape(), trans_b).expect("validated in forward");
        let (m, k, n) = (d.m, d.k, d.n);
        if let Some(s) = self.slot(acc, a) {
            for t in 0..d.batch {
                let a_off = if d.a_batched { t * m * k } else { 0 };
                let b_off = if d.b_batched { t * k * n } else { 0 };
                // dA (m×k) += G (m×n) · B_effᵀ (n×k)
                let bt_strides = if trans_b { (k, 1) } else { (1, n) };
                gemm(
                    m,
                    n,
                    k,
                    &g[t * m * n..(t + 1) * m * n],
                    (n, 1),
                    &bv.data()[b_off..b_off + k * n],
                    bt_strides,
                    &mut s[a_off..a_off + m * k],
                    true,
                );
            }
        }
        if let Some(s) = self.slot(acc, b) {
            for t in 0..d.batch {
                let a_off = if d.a_batched { t * m * k } else { 0 };
                let b_off = if d.b_batched { t * k * n } else { 0 };
                let a_slice = &av.data()[a_off..a_off + m * k];
                let g_slice = &g[t * m * n..(t + 1) * m * n];
                if trans_b {
                    // stored B is n×k: dB += Gᵀ (n×m) · A (m×k)
                    gemm(n, m, k, g_slice, (1, n), a_slice, (k, 1), &mut s[b_off..b_off + n * k], true);
                } else {
                    // dB (k×n) += Aᵀ (k×m) · G (m×n)
                    gemm(k, m, n, a_slice, (1, k), g_slice, (n, 1), &mut s[b_off..b_off + k * n], true);
                }
            }
        }
    }

    fn pair_project_backward(&self, x: Var, w: Var, edges: Option<Var>, g: &[f64], acc: &mut Acc) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, n, dx) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (h, dz) = (wv.shape()[0], wv.shape()[2]);
        let block = |bi: usize, hi: usize, i: usize, j: usize| (((bi * h + hi) * n + i) * n + j) * dz;
        if let Some(s) = self.slot(acc, x) {
            for bi in 0..b {
                for hi in 0..h {
                    for i in 0..n {
                        for j in 0..n {
                            let go = &g[block(bi, hi, i, j)..block(bi, hi, i, j) + dz];
                            for p in 0..dx {
                                let wrow = &wv.data()[(hi * dx + p) * dz..(hi * dx + p + 1) * dz];
                                s[(bi * n + j) * dx + p] += go.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        if let Some(s) = self.slot(acc, w) {
            for bi in 0..b {
                for hi in 0..h {
                    for i in 0..n {
                        for j in 0..n {
                            let go = &g[block(bi, hi, i, j)..block(bi, hi, i, j) + dz];
                            for p in 0..dx {
                                let xjp = xv.data()[(bi * n + j) * dx + p];
                                let srow = &mut s[(hi * dx + p) * dz..(hi * dx + p + 1) * dz];
                                srow.iter_mut().zip(go).for_each(|(s, g)| *s += xjp * g);
                            }
                        }
                    }
                }
            }
        }
        if let Some(e) = edges {
            let groups = self.shape(e)[0];
            let per_group = h / groups;
            if let Some(s) = self.slot(acc, e) {
                for bi in 0..b {
                    for hi in 0..h {
                        let grp = hi / per_group;
                        for i in 0..n {
                            for j in 0..n {
                                let go = &g[block(bi, hi, i, j)..block(bi, hi, i, j) + dz];
                                let off = ((grp * n + i) * n + j) * dz;
                                s[off..off + dz].iter_mut().zip(go).for_each(|(s, g)| *s += g);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of a permutation: `g` (shaped like the output) moved back
/// through the inverse permutation.
fn permute_back(out_shape: &[usize], g: &[f64], axes: &[usize]) -> Vec<f64> {
    let mut inverse = vec![0; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    permuted(out_shape, g, &inverse)
}

/// Shapes behind [`Graph::add_position_matmul`]. Consecutive rows of `x`
/// and of the output at one position are `n·p` and `n·q` apart, so every
/// product reads and writes them in place.
struct PositionMatmul {
    b: usize,
    h: usize,
    n: usize,
    p: usize,
    q: usize,
    groups: usize,
    trans: bool,
    out_shape: [usize; 4],
}

impl PositionMatmul {
    fn new(x: &[usize], table: &[usize], trans: bool) -> Option<Self> {
        let (&[b, h, n, p], &[gn, r, s]) = (x, table) else {
            return None;
        };
        if n == 0 || gn % n != 0 || gn == 0 || h % (gn / n) != 0 {
            return None;
        }
        let (inner, q) = if trans { (s, r) } else { (r, s) };
        (inner == p).then_some(Self {
            b,
            h,
            n,
            p,
            q,
            groups: gn / n,
            trans,
            out_shape: [b, h, n, q],
        })
    }

    fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// The `b·h` rows that share group `gi`'s table, as runs of
    /// `(first row, row count, row step)`.
    fn runs(&self, gi: usize) -> Vec<(usize, usize, usize)> {
        let (b, h) = (self.b, self.h);
        let hg = h / self.groups;
        if self.groups == 1 {
            vec![(0, b * h, 1)]
        } else if b >= hg {
            (0..hg).map(|hh| (gi * hg + hh, b, h)).collect()
        } else {
            (0..b).map(|bi| (bi * h + gi * hg, hg, 1)).collect()
        }
    }

    /// Calls `f(block offset, x offset, output offset, rows, row step)` for
    /// every product.
    fn each(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (n, p, q) = (self.n, self.p, self.q);
        for gi in 0..self.groups {
            let runs = self.runs(gi);
            for i in 0..n {
                for &(r0, rows, step) in &runs {
                    f((gi * n + i) * p * q, r0 * n * p + i * p, r0 * n * q + i * q, rows, step);
                }
            }
        }
    }

    /// Strides of block `i` read as the `p×q` right operand.
    fn block_strides(&self) -> (usize, usize) {
        if self.trans {
            (1, self.p)
        } else {
            (self.q, 1)
        }
    }

    fn forward(&self, x: &[f64], table: &[f64], out: &mut [f64]) {
        let (n, p, q) = (self.n, self.p, self.q);
        let bs = self.block_strides();
        self.each(|t, xo, oo, rows, step| {
            let (xs, os) = (step * n * p, step * n * q);
            gemm_strided(rows, p, q, &x[xo..], (xs, 1), &table[t..], bs, &mut out[oo..], (os, 1), true)
        });
    }

    fn backward_x(&self, g: &[f64], table: &[f64], s: &mut [f64]) {
        let (n, p, q) = (self.n, self.p, self.q);
        let (r, c) = self.block_strides();
        self.each(|t, xo, oo, rows, step| {
            let (xs, os) = (step * n * p, step * n * q);
            gemm_strided(rows, q, p, &g[oo..], (os, 1), &table[t..], (c, r), &mut s[xo..], (xs, 1), true)
        });
    }

    fn backward_table(&self, g: &[f64], x: &[f64], s: &mut [f64]) {
        let (n, p, q) = (self.n, self.p, self.q);
        self.each(|t, xo, oo, rows, step| {
            let (xs, os) = (step * n * p, step * n * q);
            if self.trans {
                // block is q×p: += Gᵀ · X
                gemm_strided(q, rows, p, &g[oo..], (1, os), &x[xo..], (xs, 1), &mut s[t..], (p, 1), true)
            } else {
                // block is p×q: += Xᵀ · G
                gemm_strided(p, rows, q, &x[xo..], (1, xs), &g[oo..], (os, 1), &mut s[t..], (q, 1), true)
            }
        });
    }
}

fn suffix_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if b.rank() > a.rank() || a.shape()[a.rank() - b.rank()..] != *b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let blen = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % blen]))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_grad, grads_close};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// Checks every input of `build` against central differences of the
    /// weighted sum `Σ r ⊙ f(inputs)` for a fixed random `r`.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| -> (Graph, Var, Vec<Var>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let r = rand_t(g.shape(out), 77);
            let rv = g.constant(r);
            let prod = g.mul(out, rv).unwrap();
            let loss = g.sum(prod);
            (g, loss, vars)
        };
        let (g, loss, vars) = eval(inputs);
        let grads = g.backward(loss).unwrap();
        for (slot, var) in vars.iter().enumerate() {
            let numeric = finite_diff_grad(
                |t| {
                    let mut vals = inputs.to_vec();
                    vals[slot] = t.clone();
                    let (g, loss, _) = eval(&vals);
                    g.value(loss).item()
                },
                &inputs[slot],
                1e-5,
            );
            let analytic = grads.get(*var).unwrap();
            if let Err(msg) = grads_close(analytic, &numeric, 1e-4, 1e-7) {
                panic!("input {slot}: {msg}");
            }
        }
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_bt() {
        let a = rand_t(&[2, 3], 1);
        let b = rand_t(&[3, 4], 2);
        let mut g = Graph::new();
        let (va, vb) = (g.param(a), g.param(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        let expect = Tensor::ones(&[2, 4]).unwrap().matmul(&b.transpose().unwrap()).unwrap();
        assert!(grads.get(va).unwrap().max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn add_position_matmul_matches_loops() {
        let (h, n, p, q) = (4, 3, 5, 2);
        for (b, groups, trans) in [(2, 1, false), (2, 1, true), (2, 2, false), (2, 4, true), (1, 2, true)] {
            let block = if trans { [q, p] } else { [p, q] };
            let x = rand_t(&[b, h, n, p], 8);
            let table = rand_t(&[groups * n, block[0], block[1]], 9);
            let base = rand_t(&[b, h, n, q], 10);
            let mut g = Graph::new();
            let (vb, vx, vt) = (g.constant(base.clone()), g.constant(x.clone()), g.constant(table.clone()));
            let out = g.add_position_matmul(vb, vx, vt, trans).unwrap();
            let got = g.value(out);
            assert_eq!(got.shape(), &[b, h, n, q]);
            for bi in 0..b {
                for hi in 0..h {
                    let t = hi / (h / groups) * n;
                    for i in 0..n {
                        for j in 0..q {
                            let mut want = base.data()[((bi * h + hi) * n + i) * q + j];
                            for c in 0..p {
                                let w = if trans {
                                    table.data()[((t + i) * q + j) * p + c]
                                } else {
                                    table.data()[((t + i) * p + c) * q + j]
                                };
                                want += x.data()[((bi * h + hi) * n + i) * p + c] * w;
                            }
                            let have = got.data()[((bi * h + hi) * n + i) * q + j];
                            assert!((have - want).abs() < 1e-12, "{groups} {trans}: {have} vs {want}");
                        }
                    }
                }
            }
        }
        let mut g = Graph::new();
        let (vb, vx) = (g.constant(rand_t(&[1, 2, 3, 4], 1)), g.constant(rand_t(&[1, 2, 3, 4], 2)));
        for shape in [[3, 4, 5], [3, 5, 4], [9, 4, 4], [4, 4, 4]] {
            let vt = g.constant(rand_t(&shape, 3));
            assert!(g.add_position_matmul(vb, vx, vt, false).is_err(), "{shape:?}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = Graph::new();
        let a = g.param(rand_t(&[3, 3], 4));
        let b = g.relu(a);
        let c = g.matmul(b, a).unwrap();
        let grads = g.backward_from(c, &Tensor::zeros(&[3, 3]).unwrap()).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient_and_unused_params_get_zeros() {
        let mut g = Graph::new();
        let c = g.constant(rand_t(&[2], 1));
        let p = g.param(rand_t(&[2], 2));
        let unused = g.param(rand_t(&[5], 3));
        let s = g.mul(c, p).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), g.value(c));
        assert_eq!(grads.get(unused).unwrap().shape(), &[5]);
        assert!(grads.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(rand_t(&[2], 2));
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn paths_accumulate() {
        // loss = sum(x ⊙ x) reaches x through two edges
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn gradcheck_elementwise_and_structural_ops() {
        let a = rand_t(&[2, 3, 4], 10);
        let b = rand_t(&[2, 3, 4], 11);
        let bias = rand_t(&[4], 12);
        check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        check(&[a.clone(), bias.clone()], |g, v| g.add_suffix(v[0], v[1]).unwrap());
        check(&[a.clone(), bias.clone()], |g, v| g.mul_suffix(v[0], v[1]).unwrap());
        check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -0.7));
        check(std::slice::from_ref(&a), |g, v| g.relu(v[0]));
        check(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[6, 4]).unwrap());
        check(std::slice::from_ref(&a), |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
        let pos = [rand_t(&[2, 2, 3, 4], 11), rand_t(&[2, 2, 3, 2], 12)];
        check(&[pos[1].clone(), pos[0].clone(), rand_t(&[3, 4, 2], 13)], |g, v| {
            g.add_position_matmul(v[0], v[1], v[2], false).unwrap()
        });
        check(&[pos[1].clone(), pos[0].clone(), rand_t(&[6, 2, 4], 14)], |g, v| {
            g.add_position_matmul(v[0], v[1], v[2], true).unwrap()
        });
        let (x, base) = (rand_t(&[1, 4, 3, 4], 15), rand_t(&[1, 4, 3, 2], 16));
        check(&[base, x, rand_t(&[6, 4, 2], 17)], |g, v| {
            g.add_position_matmul(v[0], v[1], v[2], false).unwrap()
        });
        check(std::slice::from_ref(&a), |g, v| g.sum(v[0]));
        check(std::slice::from_ref(&a), |g, v| g.mul_const(v[0], rand_t(&[2, 3, 4], 5)).unwrap());
    }

    #[test]
    fn gradcheck_matmul_variants() {
        let a = rand_t(&[2, 3, 4], 20);
        let b = rand_t(&[2, 4, 5], 21);
        let w = rand_t(&[4, 5], 22);
        let bt = rand_t(&[2, 5, 4], 23);
        let m = rand_t(&[3, 4], 24);
        check(&[a.clone(), b], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(&[a.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(&[a.clone(), bt], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
        check(&[m, rand_t(&[2, 4, 5], 25)], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(&[a, rand_t(&[5, 4], 26)], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    }

    #[test]
    fn gradcheck_softmax_layernorm_gather_ce() {
        let x = rand_t(&[2, 3, 5], 30);
        let mask = crate::numerics::ops::causal_mask(5).unwrap();
        let sq = rand_t(&[2, 5, 5], 31);
        check(std::slice::from_ref(&x), |g, v| g.softmax_rows(v[0], None).unwrap());
        check(&[sq], |g, v| g.softmax_rows(v[0], Some(&mask)).unwrap());
        check(&[x.clone(), rand_t(&[5], 32), rand_t(&[5], 33)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
        });
        let idx = Indices::new(&[2, 3], vec![0, 3, 3, 1, 0, 0]).unwrap();
        check(&[rand_t(&[4, 3], 34)], |g, v| g.gather_rows(v[0], &idx).unwrap());
        let targets = Indices::new(&[2, 3], vec![0, 4, 2, 1, 3, 0]).unwrap();
        check(&[x], |g, v| g.label_smoothed_ce(v[0], &targets, 0.1, Some(0)).unwrap());
    }

    #[test]
    fn gradcheck_pairwise_ops() {
        let x = rand_t(&[2, 3, 4], 40);
        let w = rand_t(&[2, 4, 3], 41);
        let shared = rand_t(&[1, 3, 3, 3], 42);
        let per_head = rand_t(&[2, 3, 3, 3], 43);
        check(&[x.clone(), w.clone(), shared], |g, v| g.pair_project(v[0], v[1], Some(v[2])).unwrap());
        check(&[x.clone(), w.clone(), per_head], |g, v| g.pair_project(v[0], v[1], Some(v[2])).unwrap());
        check(&[x, w], |g, v| g.pair_project(v[0], v[1], None).unwrap());
        let q = rand_t(&[2, 2, 3, 3], 44);
        let keys = rand_t(&[2, 2, 3, 3, 3], 45);
        check(&[q, keys.clone()], |g, v| g.pair_dot(v[0], v[1]).unwrap());
        let weights = rand_t(&[2, 2, 3, 3], 46);
        check(&[weights, keys], |g, v| g.pair_weighted_sum(v[0], v[1]).unwrap());
    }
}
