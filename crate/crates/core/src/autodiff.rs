//! Reverse-mode differentiation over an append-only tape.
//!
//! Values are computed eagerly when an op is recorded. Nodes are stored in
//! creation order, so walking the tape backwards is a reverse topological
//! traversal. Leaves may borrow their data (frozen model weights are never
//! copied into the tape).
//!
//! Matrix products accumulate over the inner dimension in ascending index
//! order, one output row at a time. Row-wise ops never mix rows, so a row's
//! result does not depend on how many other rows share the tape.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{softmax_into, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packing of `batch` padded sequences of `seq_len` rows each into one
/// `[batch * seq_len, width]` matrix. Rows at or beyond `lens[b]` are padding
/// and are never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.seq_len * self.lens.len()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Gather { sources: Vec<NodeId>, picks: Vec<(u32, u32)> },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    MatMul { a: NodeId, b: NodeId },
    MatMulBt { a: NodeId, b: NodeId },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, layout: SeqLayout, heads: usize, probs: Vec<T> },
    SegmentMean { x: NodeId, groups: Vec<Vec<usize>> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: NodeId, targets: Vec<T> },
    Scale { x: NodeId, factor: T },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradients of leaf tensors that required grad, keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Number of leaves that received a gradient.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn width(shape: &[usize]) -> usize {
    match shape {
        [] => 1,
        [n] => *n,
        [.., c] => *c,
    }
}

fn rows(shape: &[usize]) -> usize {
    match shape {
        [] | [_] => 1,
        [r, ..] => *r,
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, inputs: &[NodeId], op: Op<T>) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), shape, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a tensor as a leaf, borrowing its data.
    pub fn input(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            needs_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an owned constant leaf (never receives a gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(alloc::format!("constant shape {shape:?} vs {} values", data.len())));
        }
        self.nodes.push(Node { value: Cow::Owned(data), shape, needs_grad: false, op: Op::Leaf });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn mat(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(alloc::format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Stack rows picked from several matrices (or vectors, treated as
    /// single rows) into one `[picks.len(), width]` matrix. Backward scatters
    /// into exactly the picked rows.
    pub fn gather(&mut self, sources: &[NodeId], picks: &[(u32, u32)]) -> Result<NodeId> {
        let w = match sources.first() {
            Some(s) => width(self.shape(*s)),
            None => return Err(shape_err("gather with no sources")),
        };
        for s in sources {
            if width(self.shape(*s)) != w {
                return Err(shape_err("gather sources differ in width"));
            }
        }
        let mut out = Vec::with_capacity(picks.len() * w);
        for &(src, row) in picks {
            let node = sources
                .get(src as usize)
                .ok_or(Error::Index { index: src as usize, len: sources.len() })?;
            let n_rows = rows(self.shape(*node));
            if row as usize >= n_rows {
                return Err(Error::Index { index: row as usize, len: n_rows });
            }
            let r = row as usize;
            out.extend_from_slice(&self.value(*node)[r * w..(r + 1) * w]);
        }
        let op = Op::Gather { sources: sources.to_vec(), picks: picks.to_vec() };
        Ok(self.push(out, vec![picks.len(), w], sources, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(alloc::format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, &[a, b], Op::Add { a, b }))
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let w = width(self.shape(x));
        if self.shape(bias) != [w] {
            return Err(shape_err(alloc::format!("bias {:?} for width {w}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(w).flat_map(|row| row.iter().zip(b).map(|(u, v)| *u + *v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, &[x, bias], Op::AddBias { x, bias }))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(shape_err(alloc::format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::ZERO; m * n];
        mm(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], &[a, b], Op::MatMul { a, b }))
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat(a)?;
        let (n, k2) = self.mat(b)?;
        if k != k2 {
            return Err(shape_err(alloc::format!("matmul_bt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::ZERO; m * n];
        mm_bt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], &[a, b], Op::MatMulBt { a, b }))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, &[x], Op::Gelu { x })
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, &[x], Op::Scale { x, factor })
    }

    /// Row-wise layer normalization with eps = 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let w = width(self.shape(x));
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(shape_err("layer_norm parameter width"));
        }
        let eps = T::from_f64(1e-5);
        let inv_w = T::ONE / T::from_f64(w as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(xs.len() / w.max(1));
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(w) {
            let mean = row.iter().fold(T::ZERO, |a, &v| a + v) * inv_w;
            let var = row.iter().fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean)) * inv_w;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Multi-head scaled dot-product attention over padded sequences. `q`,
    /// `k`, `v` are `[layout.rows(), width]`; width is split into `heads`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: &SeqLayout, heads: usize) -> Result<NodeId> {
        let (n, e) = self.mat(q)?;
        if self.mat(k)? != (n, e) || self.mat(v)? != (n, e) {
            return Err(shape_err("attention q/k/v shapes differ"));
        }
        if n != layout.rows() {
            return Err(shape_err(alloc::format!("attention over {n} rows, layout has {}", layout.rows())));
        }
        if heads == 0 || e % heads != 0 {
            return Err(shape_err(alloc::format!("width {e} not divisible into {heads} heads")));
        }
        if layout.lens.iter().any(|&l| l == 0 || l > layout.seq_len) {
            return Err(shape_err("attention lengths must be in 1..=seq_len"));
        }
        let d = e / heads;
        let l = layout.seq_len;
        let scale = T::ONE / T::from_f64(d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::ZERO; layout.batch() * heads * l * l];
        let mut out = vec![T::ZERO; n * e];
        let mut scores = Vec::with_capacity(l);
        let mut p = Vec::with_capacity(l);
        for (b, &len) in layout.lens.iter().enumerate() {
            for h in 0..heads {
                let off = h * d;
                for i in 0..l {
                    let qi = &qv[(b * l + i) * e + off..][..d];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kv[(b * l + j) * e + off..][..d];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_into(&scores, &mut p);
                    let prow = &mut probs[((b * heads + h) * l + i) * l..][..l];
                    prow[..len].copy_from_slice(&p);
                    let orow = &mut out[(b * l + i) * e + off..][..d];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(b * l + j) * e + off..][..d];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let op = Op::Attention { q, k, v, layout: layout.clone(), heads, probs };
        Ok(self.push(out, vec![n, e], &[q, k, v], op))
    }

    /// One output row per group: the mean of `x`'s rows listed in the group.
    pub fn segment_mean(&mut self, x: NodeId, groups: &[Vec<usize>]) -> Result<NodeId> {
        let (r, w) = self.mat(x)?;
        let xs = self.value(x);
        let mut out = vec![T::ZERO; groups.len() * w];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Invalid("segment_mean over an empty group".into()));
            }
            let inv = T::ONE / T::from_f64(members.len() as f64);
            let orow = &mut out[g * w..(g + 1) * w];
            for &m in members {
                if m >= r {
                    return Err(Error::Index { index: m, len: r });
                }
                for (o, &v) in orow.iter_mut().zip(&xs[m * w..(m + 1) * w]) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let op = Op::SegmentMean { x, groups: groups.to_vec() };
        Ok(self.push(out, vec![groups.len(), w], &[x], op))
    }

    /// Mean cross-entropy over the rows of `[n, C]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.mat(logits)?;
        if targets.len() != n || n == 0 {
            return Err(shape_err(alloc::format!("{} targets for {n} logit rows", targets.len())));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::ZERO;
        let mut p = Vec::with_capacity(c);
        for (row, &t) in lv.chunks(c).zip(targets) {
            if t >= c {
                return Err(Error::Index { index: t, len: c });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cross-entropy logits".into()));
            }
            softmax_into(row, &mut p);
            let m = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().fold(T::ZERO, |a, &v| a + (v - m).exp()).ln() + m;
            loss += lse - row[t];
            probs.extend_from_slice(&p);
        }
        let loss = loss / T::from_f64(n as f64);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(vec![loss], vec![], &[logits], op))
    }

    /// Mean squared error between the `n` values of `pred` and `targets`.
    pub fn mse(&mut self, pred: NodeId, targets: &[T]) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.len() != targets.len() || pv.is_empty() {
            return Err(shape_err(alloc::format!("{} predictions for {} targets", pv.len(), targets.len())));
        }
        let sum = pv.iter().zip(targets).fold(T::ZERO, |a, (&p, &t)| a + (p - t) * (p - t));
        let loss = sum / T::from_f64(pv.len() as f64);
        let op = Op::Mse { pred, targets: targets.to_vec() };
        Ok(self.push(vec![loss], vec![], &[pred], op))
    }

    /// Backpropagate from a scalar node. Only leaves that required grad get
    /// an entry in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward from a non-scalar node"));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(node.needs_grad && matches!(node.op, Op::Leaf)) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Gather { sources, picks } => {
                let w = width(&node.shape);
                for (r, &(src, row)) in picks.iter().enumerate() {
                    let id = sources[src as usize];
                    if !self.wants(id) {
                        continue;
                    }
                    let buf = slot(grads, id, self.value(id).len());
                    let row = row as usize;
                    for (d, &v) in buf[row * w..(row + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *d += v;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        let buf = slot(grads, id, g.len());
                        add_into(buf, g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let w = width(&node.shape);
                    let buf = slot(grads, *bias, w);
                    for row in g.chunks(w) {
                        add_into(buf, row);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.mat(*a).unwrap_or_default();
                let n = width(&node.shape);
                if self.wants(*a) {
                    // dA = dC B^T
                    let mut da = vec![T::ZERO; m * k];
                    mm_bt(g, self.value(*b), &mut da, m, n, k);
                    add_into(slot(grads, *a, m * k), &da);
                }
                if self.wants(*b) {
                    // dB = A^T dC
                    let mut db = vec![T::ZERO; k * n];
                    mm_at(self.value(*a), g, &mut db, m, k, n);
                    add_into(slot(grads, *b, k * n), &db);
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = self.mat(*a).unwrap_or_default();
                let n = width(&node.shape);
                if self.wants(*a) {
                    // dA = dC B
                    let mut da = vec![T::ZERO; m * k];
                    mm(g, self.value(*b), &mut da, m, n, k);
                    add_into(slot(grads, *a, m * k), &da);
                }
                if self.wants(*b) {
                    // dB = dC^T A
                    let mut db = vec![T::ZERO; n * k];
                    mm_at(g, self.value(*a), &mut db, m, n, k);
                    add_into(slot(grads, *b, n * k), &db);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let buf = slot(grads, *x, g.len());
                    for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    let buf = slot(grads, *x, g.len());
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let w = width(&node.shape);
                let gam = self.value(*gamma);
                if self.wants(*x) {
                    let inv_w = T::ONE / T::from_f64(w as f64);
                    let mut dx = vec![T::ZERO; g.len()];
                    for (r, ((grow, hrow), drow)) in g.chunks(w).zip(xhat.chunks(w)).zip(dx.chunks_mut(w)).enumerate() {
                        let mut sum_d = T::ZERO;
                        let mut sum_dh = T::ZERO;
                        for j in 0..w {
                            let dh = grow[j] * gam[j];
                            sum_d += dh;
                            sum_dh += dh * hrow[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..w {
                            let dh = grow[j] * gam[j];
                            drow[j] = inv * (dh - sum_d * inv_w - hrow[j] * sum_dh * inv_w);
                        }
                    }
                    add_into(slot(grads, *x, g.len()), &dx);
                }
                if self.wants(*gamma) {
                    let buf = slot(grads, *gamma, w);
                    for (grow, hrow) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let buf = slot(grads, *beta, w);
                    for grow in g.chunks(w) {
                        add_into(buf, grow);
                    }
                }
            }
            Op::Attention { q, k, v, layout, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, layout, *heads, probs, grads);
            }
            Op::SegmentMean { x, groups } => {
                if self.wants(*x) {
                    let w = width(&node.shape);
                    let n = self.value(*x).len();
                    let buf = slot(grads, *x, n);
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = T::ONE / T::from_f64(members.len() as f64);
                        let grow = &g[gi * w..(gi + 1) * w];
                        for &m in members {
                            for (d, &gv) in buf[m * w..(m + 1) * w].iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let c = probs.len() / targets.len();
                    let s = g[0] / T::from_f64(targets.len() as f64);
                    let buf = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let mut d = probs[r * c + j];
                            if j == t {
                                d -= T::ONE;
                            }
                            buf[r * c + j] += d * s;
                        }
                    }
                }
            }
            Op::Mse { pred, targets } => {
                if self.wants(*pred) {
                    let pv = self.value(*pred);
                    let s = g[0] * T::from_f64(2.0) / T::from_f64(targets.len() as f64);
                    let buf = slot(grads, *pred, pv.len());
                    for ((d, &p), &t) in buf.iter_mut().zip(pv).zip(targets) {
                        *d += (p - t) * s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &SeqLayout,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, e) = self.mat(q).unwrap_or_default();
        let d = e / heads;
        let l = layout.seq_len;
        let scale = T::ONE / T::from_f64(d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::ZERO; n * e];
        let mut dk = vec![T::ZERO; n * e];
        let mut dv = vec![T::ZERO; n * e];
        let mut dp = Vec::with_capacity(l);
        for (b, &len) in layout.lens.iter().enumerate() {
            for h in 0..heads {
                let off = h * d;
                for i in 0..l {
                    let p = &probs[((b * heads + h) * l + i) * l..][..len];
                    let go = &g[(b * l + i) * e + off..][..d];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let row = (b * l + j) * e + off;
                        dp.push(dot(go, &vv[row..row + d]));
                        for (dvx, &gx) in dv[row..row + d].iter_mut().zip(go) {
                            *dvx += pj * gx;
                        }
                    }
                    let inner = p.iter().zip(&dp).fold(T::ZERO, |a, (&pj, &dpj)| a + pj * dpj);
                    let qrow = (b * l + i) * e + off;
                    for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                        let ds = pj * (dpj - inner) * scale;
                        let krow = (b * l + j) * e + off;
                        for t in 0..d {
                            dq[qrow + t] += ds * kv[krow + t];
                            dk[krow + t] += ds * qv[qrow + t];
                        }
                    }
                }
            }
        }
        for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(id) {
                add_into(slot(grads, id, n * e), &buf);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::ZERO; len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Eight interleaved partial sums (so the loop vectorizes), combined in a
/// fixed order; the result depends only on the two slices.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::ZERO; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ac.remainder().iter().zip(bc.remainder()).fold(T::ZERO, |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// `out[m, n] = a[m, k] b[k, n]`, accumulating over `k` in ascending order.
fn mm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] = a[m, k] b[n, k]^T`.
fn mm_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k, n] = a[m, k]^T b[m, n]`.
fn mm_at<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Compare analytic gradients with central differences.
///
/// `loss_fn` returns the loss and one analytic gradient per parameter tensor.
/// Returns the maximum over all entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &mut [Tensor<f64>], eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("finite-difference eps must be positive".into()));
    }
    let (l0, analytic) = loss_fn(params)?;
    let (l1, again) = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() || analytic != again {
        return Err(Error::Invalid("loss function is not deterministic".into()));
    }
    if analytic.len() != params.len() {
        return Err(shape_err("one analytic gradient per parameter expected"));
    }
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        if analytic[p].len() != params[p].len() {
            return Err(shape_err("analytic gradient length"));
        }
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + eps;
            let (up, _) = loss_fn(params)?;
            params[p].data_mut()[i] = orig - eps;
            let (down, _) = loss_fn(params)?;
            params[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
