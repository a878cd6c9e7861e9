//! Matrix-level reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value (and whatever the
//! backward rule needs) to a [`Tape`]. Nodes only reference earlier nodes, so
//! the insertion order is a topological order and [`Tape::backward`] is a
//! single reverse sweep that visits each node once.
//!
//! Besides elementwise and matrix-product primitives the tape has three fused
//! operations sized for small transformers: row-wise layer normalisation,
//! block-causal multi-head attention over concatenated sequences, and masked
//! token cross-entropy.

use crate::error::{Error, Result};
use crate::numerics::matrix::{gemm, gemm_into, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous token range `[start, start + len)` treated as one causal
/// sequence by [`Tape::causal_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const LAYER_NORM_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        // one lower-triangular len x len block per (segment, head)
        probs: Vec<Vec<f32>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        count: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Every parameter has an
    /// entry (exactly zero when the loss does not depend on it); constants
    /// have none.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    fn push_node(&mut self, value: Matrix, op: Op, needs_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad, false)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with `W` stored `out x in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds the `1 x cols` row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(format!(
                "add_row {}x{} with {}x{}",
                av.rows(),
                av.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Row-wise layer normalisation with learned `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != cols {
                return Err(Error::shape(format!(
                    "layer_norm {name} is {}x{}, expected 1x{cols}",
                    pv.rows(),
                    pv.cols()
                )));
            }
        }
        let (gv, bv) = (self.value(gain).as_slice(), self.value(bias).as_slice());
        let mut xhat = Matrix::zeros(xv.rows(), cols);
        let mut out = Matrix::zeros(xv.rows(), cols);
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * s;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * gv[c] + bv[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::contract(format!(
                "gather index {bad} outside table of {} rows",
                tv.rows()
            )));
        }
        let cols = tv.cols();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask applied
    /// independently inside each segment. `q`, `k`, `v` are `N x d` with the
    /// segments tiling `0..N`; heads split the columns evenly.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.value(q).shape();
        if self.value(k).shape() != (n, d) || self.value(v).shape() != (n, d) {
            return Err(Error::shape("attention q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{d} columns do not split into {heads} heads")));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered {
                return Err(Error::contract("attention segments must tile the rows in order"));
            }
            covered += s.len;
        }
        if covered != n {
            return Err(Error::contract(format!(
                "attention segments cover {covered} of {n} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut scores = Vec::new();
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![0.0f32; t * t];
                for i in 0..t {
                    let qi = &qv.row(seg.start + i)[cols.clone()];
                    scores.clear();
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv.row(seg.start + j)[cols.clone()];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut p[i * t..i * t + t];
                    for j in 0..=i {
                        prow[j] = scores[j] / z;
                    }
                    let orow = &mut out.row_mut(seg.start + i)[cols.clone()];
                    for j in 0..=i {
                        let w = prow[j];
                        let vj = &vv.row(seg.start + j)[cols.clone()];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target is `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::shape(format!(
                "{} logit rows for {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross-entropy with every position masked"));
        }
        let vocab = lv.cols();
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let mut probs = Matrix::zeros(lv.rows(), vocab);
        let mut total = 0.0f64;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let pr = probs.row_mut(r);
            let mut z = 0.0f32;
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            total += f64::from(z.ln() + max - row[t]);
        }
        let loss = (total / count as f64) as f32;
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.is_param {
                *g = None;
            } else if g.is_none() {
                *g = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gemm(g, false, self.value(*b), true));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gemm(self.value(*a), true, g, false));
                }
            }
            Op::MatMulT(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                if self.wants(*a) {
                    accumulate(grads, *a, gemm(g, false, self.value(*b), false));
                }
                if self.wants(*b) {
                    accumulate_gemm(grads, *b, g, true, self.value(*a), false);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut col = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (c, x) in col.iter_mut().zip(g.row(r)) {
                            *c += x;
                        }
                    }
                    accumulate(grads, *row, Matrix::row_vector(col));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*a), |gy, x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    accumulate(grads, *a, d);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.as_slice()[0]));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = xhat.cols();
                let gv = self.value(*gain).as_slice();
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(xhat.rows(), cols);
                    for r in 0..xhat.rows() {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                        }
                        mean_d /= cols as f32;
                        mean_dx /= cols as f32;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = rstd[r] * (gr[c] * gv[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..xhat.rows() {
                        for ((d, gy), xh) in dg.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += gy * xh;
                        }
                    }
                    accumulate(grads, *gain, Matrix::row_vector(dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (d, gy) in db.iter_mut().zip(g.row(r)) {
                            *d += gy;
                        }
                    }
                    accumulate(grads, *bias, Matrix::row_vector(db));
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, gy) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += gy;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (n, d) = g.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                let mut dp = Vec::new();
                for (si, seg) in segments.iter().enumerate() {
                    let t = seg.len;
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[si * heads + h];
                        for i in 0..t {
                            let gi = &g.row(seg.start + i)[cols.clone()];
                            let prow = &p[i * t..i * t + t];
                            dp.clear();
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                let vj = &vv.row(seg.start + j)[cols.clone()];
                                let dpij = dot(gi, vj);
                                weighted += prow[j] * dpij;
                                dp.push(dpij);
                                let dvj = &mut dv.row_mut(seg.start + j)[cols.clone()];
                                for (o, x) in dvj.iter_mut().zip(gi) {
                                    *o += prow[j] * x;
                                }
                            }
                            let qi = &qv.row(seg.start + i)[cols.clone()];
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(seg.start + j)[cols.clone()];
                                let dqi = &mut dq.row_mut(seg.start + i)[cols.clone()];
                                for (o, x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.row_mut(seg.start + j)[cols.clone()];
                                for (o, x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        accumulate(grads, var, grad);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let scale = g.as_slice()[0] / *count as f32;
                    let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let out = dl.row_mut(r);
                        for (o, p) in out.iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        out[t] -= scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(grads: &mut [Option<Matrix>], var: Var, a: &Matrix, a_t: bool, b: &Matrix, b_t: bool) {
    match &mut grads[var.0] {
        Some(existing) => gemm_into(a, a_t, b, b_t, existing, 1.0),
        slot @ None => *slot = Some(gemm(a, a_t, b, b_t)),
    }
}
