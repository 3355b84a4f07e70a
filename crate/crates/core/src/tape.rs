//! Reverse-mode autodiff over a linear tape.
//!
//! The tape owns every tensor. Parameters are registered first and survive
//! [`Tape::reset`]; everything recorded afterwards is transient and dropped on
//! reset. Gradients accumulate into leaves until [`Tape::zero_grad`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    MatMul { a: TensorId, w: TensorId, rows: usize, k: usize, m: usize },
    Add { x: TensorId, y: TensorId },
    Mul { x: TensorId, y: TensorId },
    Scale { x: TensorId, c: f64 },
    AddBias { x: TensorId, b: TensorId },
    Gelu { x: TensorId },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: TensorId, ids: Vec<usize> },
    ConcatSeq { parts: Vec<TensorId> },
    GatherTokens { x: TensorId, indices: Vec<usize> },
    Reshape { x: TensorId },
    Attention { q: TensorId, k: TensorId, v: TensorId, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, include: Vec<bool>, probs: Vec<f64>, count: usize },
    Sum { x: TensorId },
}

#[derive(Debug, Clone)]
struct Record {
    op: Op,
    out: TensorId,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    /// Output of a recorded op (as opposed to a leaf).
    produced: Vec<bool>,
    records: Vec<Record>,
    persistent: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a persistent leaf. Must happen before anything transient is recorded.
    pub fn param(&mut self, t: Tensor) -> Result<TensorId> {
        if self.nodes.len() != self.persistent {
            return Err(Error::Contract("parameters must be registered before transient tensors"));
        }
        let id = self.push_leaf(t);
        self.persistent += 1;
        Ok(id)
    }

    /// Records a transient leaf.
    pub fn input(&mut self, t: Tensor) -> TensorId {
        self.push_leaf(t)
    }

    fn push_leaf(&mut self, t: Tensor) -> TensorId {
        self.nodes.push(t);
        self.produced.push(false);
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, mut out: Tensor, inputs: &[TensorId], op: Op) -> TensorId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad());
        out.set_requires_grad(rg);
        self.nodes.push(out);
        self.produced.push(true);
        let id = TensorId(self.nodes.len() - 1);
        self.records.push(Record { op, out: id });
        id
    }

    /// Drops every transient tensor and recorded op; parameters stay.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
        self.produced.truncate(self.persistent);
        self.records.clear();
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.persistent
    }

    pub fn param_ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.persistent).map(TensorId)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_ops(&self) -> usize {
        self.records.len()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut Tensor {
        &mut self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].values()
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].grad()
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape()
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// `a[.., k] · w[k×m]`, applied to every last-axis row of `a`.
    pub fn matmul(&mut self, a: TensorId, w: TensorId) -> Result<TensorId> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sw.rank() != 2 || sa.rank() == 0 || sa.last() != sw.dims()[0] {
            return Err(Error::Dimension { op: "matmul", lhs: sa, rhs: sw });
        }
        let (rows, k, m) = (sa.rows(), sa.last(), sw.dims()[1]);
        let mut out = vec![0.0; rows * m];
        tensor::matmul_acc(self.value(a), self.value(w), &mut out, rows, k, m);
        let t = Tensor::with_shape(sa.with_last(m), out);
        Ok(self.push_op(t, &[a, w], Op::MatMul { a, w, rows, k, m }))
    }

    pub fn add(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.same_shape("add", x, y)?;
        let v = self.value(x).iter().zip(self.value(y)).map(|(a, b)| a + b).collect();
        let t = Tensor::with_shape(self.shape(x), v);
        Ok(self.push_op(t, &[x, y], Op::Add { x, y }))
    }

    pub fn mul(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.same_shape("mul", x, y)?;
        let v = self.value(x).iter().zip(self.value(y)).map(|(a, b)| a * b).collect();
        let t = Tensor::with_shape(self.shape(x), v);
        Ok(self.push_op(t, &[x, y], Op::Mul { x, y }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let v = self.value(x).iter().map(|a| a * c).collect();
        let t = Tensor::with_shape(self.shape(x), v);
        self.push_op(t, &[x], Op::Scale { x, c })
    }

    /// Adds a length-`last` vector to every last-axis row.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.rank() != 1 || sb.last() != sx.last() {
            return Err(Error::Dimension { op: "add_bias", lhs: sx, rhs: sb });
        }
        let bias = self.value(b);
        let w = sx.last();
        let v = self.value(x).iter().enumerate().map(|(i, a)| a + bias[i % w]).collect();
        let t = Tensor::with_shape(sx, v);
        Ok(self.push_op(t, &[x, b], Op::AddBias { x, b }))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).iter().map(|&a| tensor::gelu_scalar(a)).collect();
        let t = Tensor::with_shape(self.shape(x), v);
        self.push_op(t, &[x], Op::Gelu { x })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN"));
        }
        let w = s.last();
        let mut out = vec![0.0; xs.len()];
        for (src, dst) in xs.chunks(w).zip(out.chunks_mut(w)) {
            tensor::softmax_into(src, dst);
        }
        let t = Tensor::with_shape(s, out);
        Ok(self.push_op(t, &[x], Op::Softmax { x }))
    }

    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let s = self.shape(x);
        let d = s.last();
        for p in [gain, bias] {
            let sp = self.shape(p);
            if sp.rank() != 1 || sp.last() != d {
                return Err(Error::Dimension { op: "layer_norm", lhs: s, rhs: sp });
            }
        }
        let (xs, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let rows = s.rows();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::with_shape(s, out);
        Ok(self.push_op(t, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table);
        if st.rank() != 2 {
            return Err(Error::Dimension { op: "embedding", lhs: st, rhs: Shape::scalar() });
        }
        let (vocab, d) = (st.dims()[0], st.dims()[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { what: "embedding id", index: id, bound: vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::with_shape(Shape::new(&[ids.len(), d])?, out);
        Ok(self.push_op(t, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Concatenates `[b×nᵢ×d]` tensors along the sequence axis.
    pub fn concat_seq(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = self.shape(*parts.first().ok_or(Error::Contract("concat of nothing"))?);
        if first.rank() != 3 {
            return Err(Error::Dimension { op: "concat_seq", lhs: first, rhs: first });
        }
        let (b, d) = (first.dims()[0], first.dims()[2]);
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rank() != 3 || sp.dims()[0] != b || sp.dims()[2] != d {
                return Err(Error::Dimension { op: "concat_seq", lhs: first, rhs: sp });
            }
            total += sp.dims()[1];
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let n = self.shape(p).dims()[1];
                out.extend_from_slice(&self.value(p)[bi * n * d..(bi + 1) * n * d]);
            }
        }
        let t = Tensor::with_shape(Shape::new(&[b, total, d])?, out);
        Ok(self.push_op(t, parts, Op::ConcatSeq { parts: parts.to_vec() }))
    }

    /// `x[:, indices, :]` for a `[b×n×d]` tensor.
    pub fn gather_tokens(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.shape(x);
        if s.rank() != 3 {
            return Err(Error::Dimension { op: "gather_tokens", lhs: s, rhs: s });
        }
        let (b, n, d) = (s.dims()[0], s.dims()[1], s.dims()[2]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index { what: "token index", index: bad, bound: n });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(b * indices.len() * d);
        for bi in 0..b {
            for &i in indices {
                let off = (bi * n + i) * d;
                out.extend_from_slice(&xs[off..off + d]);
            }
        }
        let t = Tensor::with_shape(Shape::new(&[b, indices.len(), d])?, out);
        Ok(self.push_op(t, &[x], Op::GatherTokens { x, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, x: TensorId, dims: &[usize]) -> Result<TensorId> {
        let s = self.shape(x);
        let ns = Shape::new(dims)?;
        if ns.numel() != s.numel() {
            return Err(Error::Dimension { op: "reshape", lhs: s, rhs: ns });
        }
        let t = Tensor::with_shape(ns, self.value(x).to_vec());
        Ok(self.push_op(t, &[x], Op::Reshape { x }))
    }

    /// Causal multi-head attention over `[b×s×d]` queries, keys and values.
    ///
    /// Heads are column blocks of width `d / heads`; each head is a pair of
    /// rank-2 products per batch element.
    pub fn causal_attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> Result<TensorId> {
        let s = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != s {
                return Err(Error::Dimension { op: "attention", lhs: s, rhs: self.shape(other) });
            }
        }
        if s.rank() != 3 || heads == 0 || !s.last().is_multiple_of(heads) {
            return Err(Error::Dimension { op: "attention", lhs: s, rhs: s });
        }
        let (b, n, d) = (s.dims()[0], s.dims()[1], s.dims()[2]);
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; b * heads * n * n];
        let mut out = vec![0.0; b * n * d];
        let mut scores = vec![0.0; n];
        for bi in 0..b {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..n {
                    let qi = &qs[(bi * n + i) * d + col..][..dh];
                    for j in 0..=i {
                        scores[j] = scale * tensor::dot(qi, &ks[(bi * n + j) * d + col..][..dh]);
                    }
                    let p = &mut probs[((bi * heads + h) * n + i) * n..][..n];
                    tensor::softmax_into(&scores[..=i], &mut p[..=i]);
                    let oi = &mut out[(bi * n + i) * d + col..][..dh];
                    for j in 0..=i {
                        let pij = p[j];
                        let vj = &vs[(bi * n + j) * d + col..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::with_shape(s, out);
        Ok(self.push_op(t, &[q, k, v], Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean negative log-likelihood over rows whose `ignore` flag is false.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize], ignore: &[bool]) -> Result<TensorId> {
        let s = self.shape(logits);
        let (rows, vocab) = (s.rows(), s.last());
        if targets.len() != rows || ignore.len() != rows {
            return Err(Error::Contract("targets and mask must have one entry per logit row"));
        }
        let xs = self.value(logits);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("logits contain NaN"));
        }
        let include: Vec<bool> = ignore.iter().map(|&m| !m).collect();
        let count = include.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateLoss);
        }
        let mut probs = vec![0.0; xs.len()];
        let mut total = 0.0;
        for r in 0..rows {
            if !include[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index { what: "target id", index: t, bound: vocab });
            }
            let row = &xs[r * vocab..(r + 1) * vocab];
            total += tensor::log_sum_exp(row) - row[t];
            tensor::softmax_into(row, &mut probs[r * vocab..(r + 1) * vocab]);
        }
        let t = Tensor::scalar(total / count as f64);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), include, probs, count };
        Ok(self.push_op(t, &[logits], op))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let t = Tensor::scalar(self.value(x).iter().sum());
        self.push_op(t, &[x], Op::Sum { x })
    }

    fn same_shape(&self, op: &'static str, x: TensorId, y: TensorId) -> Result<()> {
        let (a, b) = (self.shape(x), self.shape(y));
        if a != b {
            return Err(Error::Dimension { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates `d root / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("root is not on this tape"));
        }
        if self.nodes[root.0].numel() != 1 {
            return Err(Error::Contract("backward root must be a scalar"));
        }
        if !self.produced[root.0] {
            return Err(Error::Contract("backward root must be produced by a recorded op"));
        }
        for (node, &p) in self.nodes.iter_mut().zip(&self.produced) {
            if p {
                node.zero_grad();
            }
        }
        self.nodes[root.0].grad_mut()[0] = 1.0;
        let upto = self.records.iter().position(|r| r.out == root).ok_or(Error::Contract("root not recorded"))?;
        for rec in self.records[..=upto].iter().rev() {
            if !self.nodes[rec.out.0].requires_grad() {
                continue;
            }
            let dout = self.nodes[rec.out.0].take_grad();
            let contributions = backward_op(&rec.op, &self.nodes, rec.out, &dout);
            self.nodes[rec.out.0].put_grad(dout);
            for (id, g) in contributions {
                for (slot, v) in self.nodes[id.0].grad_mut().iter_mut().zip(g) {
                    *slot += v;
                }
            }
        }
        Ok(())
    }
}

/// Gradient contributions of one op to those of its inputs that require grad.
fn backward_op(op: &Op, nodes: &[Tensor], out: TensorId, dout: &[f64]) -> Vec<(TensorId, Vec<f64>)> {
    let wants = |id: TensorId| nodes[id.0].requires_grad();
    let val = |id: TensorId| nodes[id.0].values();
    let zeros = |id: TensorId| vec![0.0; nodes[id.0].numel()];
    let mut res = Vec::new();
    match op {
        Op::MatMul { a, w, rows, k, m } => {
            if wants(*a) {
                let mut g = zeros(*a);
                tensor::matmul_grad_lhs(dout, val(*w), &mut g, *rows, *k, *m);
                res.push((*a, g));
            }
            if wants(*w) {
                let mut g = zeros(*w);
                tensor::matmul_grad_rhs(val(*a), dout, &mut g, *rows, *k, *m);
                res.push((*w, g));
            }
        }
        Op::Add { x, y } => {
            for id in [*x, *y] {
                if wants(id) {
                    res.push((id, dout.to_vec()));
                }
            }
        }
        Op::Mul { x, y } => {
            if wants(*x) {
                res.push((*x, dout.iter().zip(val(*y)).map(|(d, b)| d * b).collect()));
            }
            if wants(*y) {
                res.push((*y, dout.iter().zip(val(*x)).map(|(d, a)| d * a).collect()));
            }
        }
        Op::Scale { x, c } => {
            if wants(*x) {
                res.push((*x, dout.iter().map(|d| d * c).collect()));
            }
        }
        Op::AddBias { x, b } => {
            if wants(*x) {
                res.push((*x, dout.to_vec()));
            }
            if wants(*b) {
                let mut g = zeros(*b);
                let w = g.len();
                for row in dout.chunks(w) {
                    for (s, d) in g.iter_mut().zip(row) {
                        *s += d;
                    }
                }
                res.push((*b, g));
            }
        }
        Op::Gelu { x } => {
            if wants(*x) {
                let g = dout.iter().zip(val(*x)).map(|(d, &a)| d * tensor::gelu_derivative(a)).collect();
                res.push((*x, g));
            }
        }
        Op::Softmax { x } => {
            if wants(*x) {
                let y = val(out);
                let w = nodes[out.0].shape().last();
                let mut g = zeros(*x);
                for ((yr, dr), gr) in y.chunks(w).zip(dout.chunks(w)).zip(g.chunks_mut(w)) {
                    let s = tensor::dot(yr, dr);
                    for j in 0..w {
                        gr[j] = yr[j] * (dr[j] - s);
                    }
                }
                res.push((*x, g));
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = nodes[x.0].shape().last();
            let gv = val(*gain);
            if wants(*x) {
                let mut g = zeros(*x);
                for (r, &is) in inv_std.iter().enumerate() {
                    let dy = &dout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = dy[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        g[r * d + j] = is * (dy[j] * gv[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                res.push((*x, g));
            }
            if wants(*gain) {
                let mut g = zeros(*gain);
                for (dy, xh) in dout.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        g[j] += dy[j] * xh[j];
                    }
                }
                res.push((*gain, g));
            }
            if wants(*bias) {
                let mut g = zeros(*bias);
                for dy in dout.chunks(d) {
                    for j in 0..d {
                        g[j] += dy[j];
                    }
                }
                res.push((*bias, g));
            }
        }
        Op::Embedding { table, ids } => {
            if wants(*table) {
                let d = nodes[table.0].shape().last();
                let mut g = zeros(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += dout[r * d + j];
                    }
                }
                res.push((*table, g));
            }
        }
        Op::ConcatSeq { parts } => {
            let so = nodes[out.0].shape();
            let (b, total, d) = (so.dims()[0], so.dims()[1], so.dims()[2]);
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].shape().dims()[1];
                if wants(p) {
                    let mut g = zeros(p);
                    for bi in 0..b {
                        let src = &dout[(bi * total + offset) * d..][..n * d];
                        g[bi * n * d..(bi + 1) * n * d].copy_from_slice(src);
                    }
                    res.push((p, g));
                }
                offset += n;
            }
        }
        Op::GatherTokens { x, indices } => {
            if wants(*x) {
                let s = nodes[x.0].shape();
                let (b, n, d) = (s.dims()[0], s.dims()[1], s.dims()[2]);
                let k = indices.len();
                let mut g = zeros(*x);
                for bi in 0..b {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            g[(bi * n + i) * d + j] += dout[(bi * k + r) * d + j];
                        }
                    }
                }
                res.push((*x, g));
            }
        }
        Op::Reshape { x } => {
            if wants(*x) {
                res.push((*x, dout.to_vec()));
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let s = nodes[q.0].shape();
            let (b, n, d) = (s.dims()[0], s.dims()[1], s.dims()[2]);
            let dh = d / heads;
            let scale = 1.0 / libm::sqrt(dh as f64);
            let (qs, ks, vs) = (val(*q), val(*k), val(*v));
            let mut dq = vec![0.0; b * n * d];
            let mut dk = vec![0.0; b * n * d];
            let mut dv = vec![0.0; b * n * d];
            let mut dp = vec![0.0; n];
            for bi in 0..b {
                for h in 0..*heads {
                    let col = h * dh;
                    for i in 0..n {
                        let p = &probs[((bi * heads + h) * n + i) * n..][..n];
                        let doi = &dout[(bi * n + i) * d + col..][..dh];
                        let mut weighted = 0.0;
                        for j in 0..=i {
                            let vj = &vs[(bi * n + j) * d + col..][..dh];
                            dp[j] = tensor::dot(doi, vj);
                            weighted += p[j] * dp[j];
                            let dvj = &mut dv[(bi * n + j) * d + col..][..dh];
                            for (g, &o) in dvj.iter_mut().zip(doi) {
                                *g += p[j] * o;
                            }
                        }
                        let qi_off = (bi * n + i) * d + col;
                        for j in 0..=i {
                            let ds = scale * p[j] * (dp[j] - weighted);
                            if ds == 0.0 {
                                continue;
                            }
                            let kj_off = (bi * n + j) * d + col;
                            for c in 0..dh {
                                dq[qi_off + c] += ds * ks[kj_off + c];
                                dk[kj_off + c] += ds * qs[qi_off + c];
                            }
                        }
                    }
                }
            }
            for (id, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                if wants(id) {
                    res.push((id, g));
                }
            }
        }
        Op::CrossEntropy { logits, targets, include, probs, count } => {
            if wants(*logits) {
                let vocab = nodes[logits.0].shape().last();
                let scale = dout[0] / *count as f64;
                let mut g = zeros(*logits);
                for (r, &inc) in include.iter().enumerate() {
                    if !inc {
                        continue;
                    }
                    for j in 0..vocab {
                        g[r * vocab + j] = scale * probs[r * vocab + j];
                    }
                    g[r * vocab + targets[r]] -= scale;
                }
                res.push((*logits, g));
            }
        }
        Op::Sum { x } => {
            if wants(*x) {
                res.push((*x, vec![dout[0]; nodes[x.0].numel()]));
            }
        }
    }
    res
}
