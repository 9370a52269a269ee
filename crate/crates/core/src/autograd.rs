//! A small tensor-level reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every node after all of its consumers. Besides the usual
//! elementwise and linear-algebra ops the tape has a few fused ops for the
//! attention head (masked normalization, pooling, row min/max) whose
//! derivatives are written out directly.

use crate::tensor::{gemm, sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Blend {
        new: NodeId,
        prev: NodeId,
        keep: Vec<bool>,
    },
    ColumnToGrid {
        src: NodeId,
        batch: usize,
    },
    NormalizeRows {
        src: NodeId,
        mask: Vec<bool>,
        sums: Vec<f64>,
        fallback: Vec<bool>,
    },
    MaskedSoftmax {
        src: NodeId,
        mask: Vec<bool>,
    },
    AttentionPool {
        weights: NodeId,
        states: NodeId,
    },
    RowPick {
        src: NodeId,
        cols: Vec<usize>,
    },
    SquaredError {
        src: NodeId,
        target: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Matrix,
        gold: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    scope: &'static str,
}

/// Which end of a row `Tape::row_extreme` selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extreme {
    Min,
    Max,
}

/// Floor under which a logistic-attention row sum counts as underflowed.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    scope: &'static str,
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

    /// Tags subsequently created nodes, used to locate the first non-finite value.
    pub fn set_scope(&mut self, scope: &'static str) {
        self.scope = scope;
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scope of the first node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.scope)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            scope: self.scope,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// A leaf without gradient (masks, targets, fixed inputs).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a + bias` with a `1 x n` bias broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, value.cols()), "bias shape");
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, bias]);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(src.data());
        }
        let rows = data.len() / cols.max(1);
        let ng = self.ng(parts);
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), end - start);
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let src = self.value(a);
        let cols = src.cols();
        let value = Matrix::from_vec(
            end - start,
            cols,
            src.data()[start * cols..end * cols].to_vec(),
        );
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(value, Op::Gather(table, ids), ng)
    }

    /// Row-wise select: row `r` comes from `new` if `keep[r]`, else from `prev`.
    pub fn blend(&mut self, new: NodeId, prev: NodeId, keep: Vec<bool>) -> NodeId {
        let (vn, vp) = (self.value(new), self.value(prev));
        assert_eq!(vn.shape(), vp.shape(), "blend shape");
        let mut value = vp.clone();
        for (r, &k) in keep.iter().enumerate() {
            if k {
                value.row_mut(r).copy_from_slice(vn.row(r));
            }
        }
        let ng = self.ng(&[new, prev]);
        self.push(value, Op::Blend { new, prev, keep }, ng)
    }

    /// Reshapes a time-major column `[steps * batch x 1]` into a `[batch x steps]` grid.
    pub fn column_to_grid(&mut self, src: NodeId, batch: usize) -> NodeId {
        let s = self.value(src);
        assert_eq!(s.cols(), 1, "column_to_grid expects a column");
        let steps = s.rows() / batch;
        let mut value = Matrix::zeros(batch, steps);
        for t in 0..steps {
            for b in 0..batch {
                value.set(b, t, s.data()[t * batch + b]);
            }
        }
        let ng = self.ng(&[src]);
        self.push(value, Op::ColumnToGrid { src, batch }, ng)
    }

    /// Divides each row by its sum over unmasked entries. Masked entries become
    /// zero. A row whose sum falls below [`NORMALIZE_EPS`] is replaced by the
    /// uniform distribution over its unmasked entries (and passes no gradient).
    pub fn normalize_rows(&mut self, src: NodeId, mask: Vec<bool>) -> NodeId {
        let s = self.value(src);
        let (rows, cols) = s.shape();
        assert_eq!(mask.len(), rows * cols, "mask shape");
        let mut value = Matrix::zeros(rows, cols);
        let mut sums = vec![0.0; rows];
        let mut fallback = vec![false; rows];
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let sum: f64 = s.row(r).iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| x).sum();
            sums[r] = sum;
            let count = m.iter().filter(|&&k| k).count();
            if sum < NORMALIZE_EPS {
                fallback[r] = true;
                for (c, &k) in m.iter().enumerate() {
                    if k {
                        value.set(r, c, 1.0 / count as f64);
                    }
                }
            } else {
                for (c, &k) in m.iter().enumerate() {
                    if k {
                        value.set(r, c, s.get(r, c) / sum);
                    }
                }
            }
        }
        let ng = self.ng(&[src]);
        self.push(
            value,
            Op::NormalizeRows {
                src,
                mask,
                sums,
                fallback,
            },
            ng,
        )
    }

    /// Row-wise softmax over unmasked entries (max-subtracted); masked entries are zero.
    pub fn masked_softmax(&mut self, src: NodeId, mask: Vec<bool>) -> NodeId {
        let s = self.value(src);
        let (rows, cols) = s.shape();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let max = s
                .row(r)
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, _) in m.iter().enumerate().filter(|(_, &k)| k) {
                let e = (s.get(r, c) - max).exp();
                value.set(r, c, e);
                sum += e;
            }
            for (c, _) in m.iter().enumerate().filter(|(_, &k)| k) {
                value.set(r, c, value.get(r, c) / sum);
            }
        }
        let ng = self.ng(&[src]);
        self.push(value, Op::MaskedSoftmax { src, mask }, ng)
    }

    /// `out[b] = sum_t weights[b, t] * states[t * batch + b]`.
    pub fn attention_pool(&mut self, weights: NodeId, states: NodeId) -> NodeId {
        let (w, h) = (self.value(weights), self.value(states));
        let (batch, steps) = w.shape();
        assert_eq!(h.rows(), batch * steps, "attention_pool shape");
        let mut value = Matrix::zeros(batch, h.cols());
        for b in 0..batch {
            for t in 0..steps {
                let a = w.get(b, t);
                if a == 0.0 {
                    continue;
                }
                let src = h.row(t * batch + b);
                for (o, x) in value.row_mut(b).iter_mut().zip(src) {
                    *o += a * x;
                }
            }
        }
        let ng = self.ng(&[weights, states]);
        self.push(value, Op::AttentionPool { weights, states }, ng)
    }

    /// Per-row minimum or maximum over unmasked entries, as a `[rows x 1]` column.
    /// Ties resolve to the first attaining column.
    pub fn row_extreme(&mut self, src: NodeId, mask: &[bool], which: Extreme) -> NodeId {
        let s = self.value(src);
        let (rows, cols) = s.shape();
        let mut picks = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..cols {
                if !mask[r * cols + c] {
                    continue;
                }
                let x = s.get(r, c);
                let better = match (best, which) {
                    (None, _) => true,
                    (Some((_, b)), Extreme::Min) => x < b,
                    (Some((_, b)), Extreme::Max) => x > b,
                };
                if better {
                    best = Some((c, x));
                }
            }
            let (c, x) = best.expect("row_extreme over a fully masked row");
            picks.push(c);
            data.push(x);
        }
        let ng = self.ng(&[src]);
        self.push(
            Matrix::column(data),
            Op::RowPick { src, cols: picks },
            ng,
        )
    }

    /// `sum_i (src_i - target_i)^2` as a `1 x 1` node.
    pub fn squared_error(&mut self, src: NodeId, target: Vec<f64>) -> NodeId {
        let s = self.value(src);
        assert_eq!(s.len(), target.len(), "squared_error length");
        let loss = s
            .data()
            .iter()
            .zip(&target)
            .map(|(x, t)| (x - t) * (x - t))
            .sum();
        let ng = self.ng(&[src]);
        self.push(Matrix::scalar(loss), Op::SquaredError { src, target }, ng)
    }

    /// `sum_r weights[r] * -ln softmax(logits[r])[gold[r]]`, probabilities clamped at 1e-12.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        gold: Vec<usize>,
        weights: Vec<f64>,
    ) -> NodeId {
        let probs = softmax_rows(self.value(logits));
        let loss = gold
            .iter()
            .zip(&weights)
            .enumerate()
            .filter(|(_, (_, &w))| w != 0.0)
            .map(|(r, (&g, &w))| -w * probs.get(r, g).max(1e-12).ln())
            .sum();
        let ng = self.ng(&[logits]);
        self.push(
            Matrix::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                gold,
                weights,
            },
            ng,
        )
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut Matrix)| {
            let parent = &self.nodes[id.0];
            if !parent.needs_grad {
                return;
            }
            let slot = grads[id.0]
                .get_or_insert_with(|| Matrix::zeros(parent.value.rows(), parent.value.cols()));
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| gemm(g, false, vb, true, ga, 1.0));
                acc(*b, &mut |gb| gemm(va, true, g, false, gb, 1.0));
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*bias, &mut |gb| {
                    for r in 0..g.rows() {
                        for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| gb.add_assign(g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, d), y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| {
                for (x, d) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += k * d;
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                    *x += d * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                    *x += d * y * (1.0 - y);
                }
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for r in 0..g.rows() {
                            for (x, d) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *x += d;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |gp| {
                        for (x, d) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *x += d;
                        }
                    });
                    offset += n;
                }
                debug_assert_eq!(offset, g.rows() * cols);
            }
            Op::SliceCols(a, start) => acc(*a, &mut |ga| {
                for r in 0..g.rows() {
                    for (x, d) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *x += d;
                    }
                }
            }),
            Op::SliceRows(a, start) => acc(*a, &mut |ga| {
                let cols = g.cols();
                let dst = &mut ga.data_mut()[start * cols..start * cols + g.len()];
                for (x, d) in dst.iter_mut().zip(g.data()) {
                    *x += d;
                }
            }),
            Op::Gather(table, ids) => acc(*table, &mut |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for (x, d) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += d;
                    }
                }
            }),
            Op::Blend { new, prev, keep } => {
                acc(*new, &mut |gn| {
                    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                        for (x, d) in gn.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += d;
                        }
                    }
                });
                acc(*prev, &mut |gp| {
                    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
                        for (x, d) in gp.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += d;
                        }
                    }
                });
            }
            Op::ColumnToGrid { src, batch } => acc(*src, &mut |gs| {
                let (rows, steps) = g.shape();
                debug_assert_eq!(rows, *batch);
                for t in 0..steps {
                    for b in 0..rows {
                        gs.data_mut()[t * batch + b] += g.get(b, t);
                    }
                }
            }),
            Op::NormalizeRows {
                src,
                mask,
                sums,
                fallback,
            } => acc(*src, &mut |gs| {
                let (rows, cols) = g.shape();
                for r in 0..rows {
                    if fallback[r] {
                        continue;
                    }
                    let m = &mask[r * cols..(r + 1) * cols];
                    let dot: f64 = (0..cols)
                        .filter(|&c| m[c])
                        .map(|c| g.get(r, c) * node.value.get(r, c))
                        .sum();
                    for c in (0..cols).filter(|&c| m[c]) {
                        let v = gs.get(r, c) + (g.get(r, c) - dot) / sums[r];
                        gs.set(r, c, v);
                    }
                }
            }),
            Op::MaskedSoftmax { src, mask } => acc(*src, &mut |gs| {
                let (rows, cols) = g.shape();
                for r in 0..rows {
                    let m = &mask[r * cols..(r + 1) * cols];
                    let dot: f64 = (0..cols)
                        .filter(|&c| m[c])
                        .map(|c| g.get(r, c) * node.value.get(r, c))
                        .sum();
                    for c in (0..cols).filter(|&c| m[c]) {
                        let a = node.value.get(r, c);
                        let v = gs.get(r, c) + a * (g.get(r, c) - dot);
                        gs.set(r, c, v);
                    }
                }
            }),
            Op::AttentionPool { weights, states } => {
                let (w, h) = (self.value(*weights), self.value(*states));
                let (batch, steps) = w.shape();
                acc(*weights, &mut |gw| {
                    for b in 0..batch {
                        for t in 0..steps {
                            let dot: f64 = g.row(b).iter().zip(h.row(t * batch + b)).map(|(x, y)| x * y).sum();
                            let v = gw.get(b, t) + dot;
                            gw.set(b, t, v);
                        }
                    }
                });
                acc(*states, &mut |gh| {
                    for b in 0..batch {
                        for t in 0..steps {
                            let a = w.get(b, t);
                            if a == 0.0 {
                                continue;
                            }
                            for (x, d) in gh.row_mut(t * batch + b).iter_mut().zip(g.row(b)) {
                                *x += a * d;
                            }
                        }
                    }
                });
            }
            Op::RowPick { src, cols } => acc(*src, &mut |gs| {
                for (r, &c) in cols.iter().enumerate() {
                    let v = gs.get(r, c) + g.data()[r];
                    gs.set(r, c, v);
                }
            }),
            Op::SquaredError { src, target } => {
                let s = self.value(*src);
                let d = g.data()[0];
                acc(*src, &mut |gs| {
                    for ((x, y), t) in gs.data_mut().iter_mut().zip(s.data()).zip(target) {
                        *x += d * 2.0 * (y - t);
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                gold,
                weights,
            } => {
                let d = g.data()[0];
                acc(*logits, &mut |gl| {
                    for (r, (&gi, &w)) in gold.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..probs.cols() {
                            let onehot = if c == gi { 1.0 } else { 0.0 };
                            let v = gl.get(r, c) + d * w * (probs.get(r, c) - onehot);
                            gl.set(r, c, v);
                        }
                    }
                });
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` if it does not
    /// depend on the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materializes zeros for untouched nodes.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Matrix::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x: Matrix, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let eval = |v: &Matrix| {
            let mut tape = Tape::new();
            let id = tape.variable(v.clone());
            let out = build(&mut tape, id);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let id = tape.variable(x.clone());
        let out = build(&mut tape, id);
        let g = tape.backward(out).get_or_zeros(&tape, id);
        let n = numeric_grad(&x, &eval);
        assert!(g.max_abs_diff(&n) < 1e-7, "analytic {g:?} numeric {n:?}");
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_bias_tanh_gradient() {
        let w = rand_matrix(3, 2, 1);
        let b = rand_matrix(1, 2, 2);
        check(rand_matrix(4, 3, 3), |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let z = t.matmul(x, w);
            let z = t.add_bias(z, b);
            let z = t.tanh(z);
            t.squared_error(z, vec![0.1; 8])
        });
    }

    #[test]
    fn normalize_and_pool_gradient() {
        let h = rand_matrix(6, 3, 4);
        check(rand_matrix(6, 1, 5), |t, x| {
            let grid = t.column_to_grid(x, 2);
            let s = t.sigmoid(grid);
            let mask = vec![true, true, true, true, true, false];
            let a = t.normalize_rows(s, mask);
            let h = t.constant(h.clone());
            let c = t.attention_pool(a, h);
            t.squared_error(c, vec![0.3; 6])
        });
    }

    #[test]
    fn softmax_and_extremes_gradient() {
        check(rand_matrix(2, 4, 6), |t, x| {
            let mask = vec![true, true, false, true, true, true, true, true];
            let a = t.masked_softmax(x, mask.clone());
            let mn = t.row_extreme(x, &mask, Extreme::Min);
            let mx = t.row_extreme(x, &mask, Extreme::Max);
            let l1 = t.squared_error(a, vec![0.2; 8]);
            let l2 = t.squared_error(mn, vec![0.0; 2]);
            let l3 = t.squared_error(mx, vec![1.0; 2]);
            let s = t.add(l1, l2);
            t.add(s, l3)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check(rand_matrix(4, 4, 7), |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_rows(x, 1, 3);
            let b = t.slice_cols(b, 1, 3);
            let prev = t.slice_cols(x, 2, 4);
            let m = t.blend(a, prev, vec![true, false, true, false]);
            let g = t.gather(x, vec![3, 3, 0]);
            let g = t.slice_cols(g, 0, 2);
            let r = t.concat_rows(&[m, b, g]);
            let r2 = t.mul(r, r);
            let r3 = t.scale(r2, 0.7);
            let c = t.concat_cols(&[r, r3]);
            let logits = t.slice_cols(c, 1, 3);
            t.softmax_cross_entropy(logits, vec![0, 1, 1, 0, 1, 0, 0, 1, 1], vec![1.0; 9])
        });
    }

    #[test]
    fn normalize_rows_underflow_falls_back_to_uniform() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_vec(1, 3, vec![1e-300, 1e-300, 5.0]));
        let a = t.normalize_rows(x, vec![true, true, false]);
        assert_eq!(t.value(a).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn first_non_finite_reports_scope() {
        let mut t = Tape::new();
        t.set_scope("ok");
        let x = t.variable(Matrix::scalar(0.0));
        t.set_scope("bad");
        let y = t.scale(x, f64::INFINITY);
        let _ = t.scale(y, 0.0);
        assert_eq!(t.first_non_finite(), Some("bad"));
    }
}
