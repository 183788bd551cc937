//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients. Layer norm reuses
//! the hand-written kernels from [`crate::conditioning`]. Nodes created with
//! [`Tape::constant`] never receive gradients, and neither does anything
//! computed only from constants.

use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Matrix};
use crate::{math, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + row`, row broadcast over a's rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, cache: LayerNormCache },
    /// Row softmax; the output value doubles as the backward cache.
    Softmax(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Gather { table: NodeId, ids: Vec<usize> },
    BroadcastRows(NodeId),
    /// Elementwise product with a constant (dropout masks).
    MulConst { x: NodeId, factor: Matrix },
    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`; keeps the
    /// probabilities for backward.
    WeightedNll { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul shape mismatch");
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        matmul_acc(av, bv, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_bt shape mismatch");
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        matmul_bt_acc(av, bv, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, out.cols()), r.shape(), "add_row shape mismatch");
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (y, cache) = layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data(), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, cache }, rg))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let visible = if causal { (r + 1).min(row.len()) } else { row.len() };
            math::softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        assert!(start + len <= v.cols());
        let mut out = Matrix::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, width);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("consistent shape");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Repeats a 1 x n row `rows` times.
    pub fn broadcast_rows(&mut self, row: NodeId, rows: usize) -> NodeId {
        let v = self.value(row);
        assert_eq!(v.rows(), 1);
        let mut out = Matrix::zeros(rows, v.cols());
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(v.data());
        }
        let rg = self.rg(&[row]);
        self.push(out, Op::BroadcastRows(row), rg)
    }

    pub fn mul_const(&mut self, x: NodeId, factor: Matrix) -> NodeId {
        let mut out = self.value(x).clone();
        assert_eq!(out.shape(), factor.shape());
        for (o, f) in out.data_mut().iter_mut().zip(factor.data()) {
            *o *= f;
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst { x, factor }, rg)
    }

    /// Weighted negative log-likelihood summed over rows (a 1 x 1 node).
    pub fn weighted_nll(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len());
        assert_eq!(l.rows(), weights.len());
        let mut probs = l.clone();
        let mut loss = 0.0;
        for r in 0..probs.rows() {
            let lse = math::softmax_in_place(probs.row_mut(r));
            loss += weights[r] * (lse - l.get(r, targets[r]));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::row_vector(vec![loss]),
            Op::WeightedNll { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            rg,
        )
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut Matrix, &[Node])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let (r, c) = self.nodes[id.0].value.shape();
        let g = self.grads[id.0].get_or_insert_with(|| Matrix::zeros(r, c));
        f(g, &self.nodes);
    }

    /// Back-propagates from a 1 x 1 node, seeding its gradient with 1.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let dy = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match self.grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            // Temporarily move the op out so inputs can be borrowed freely.
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, &dy, i);
            self.nodes[i].op = op;
        }
    }

    fn backward_op(&mut self, op: &Op, dy: &Matrix, this: usize) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g, n| matmul_bt_acc(dy, &n[b.0].value, g));
                self.acc(b, |g, n| matmul_at_acc(&n[a.0].value, dy, g));
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g, n| matmul_acc(dy, &n[b.0].value, g));
                self.acc(b, |g, n| matmul_at_acc(dy, &n[a.0].value, g));
            }
            Op::Add(a, b) => {
                self.acc(*a, |g, _| g.add_assign(dy));
                self.acc(*b, |g, _| g.add_assign(dy));
            }
            Op::AddRow(a, row) => {
                self.acc(*a, |g, _| g.add_assign(dy));
                self.acc(*row, |g, _| {
                    for r in 0..dy.rows() {
                        for (o, v) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(*x, |g, _| {
                    for (o, v) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += s * v;
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.acc(x, |g, n| {
                    for ((o, v), y) in g.data_mut().iter_mut().zip(dy.data()).zip(n[this].value.data()) {
                        if *y > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let gv = self.nodes[gain.0].value.data().to_vec();
                let (dx, dgain, dbias) = layer_norm_backward(dy, &gv, cache);
                self.acc(*x, |g, _| g.add_assign(&dx));
                self.acc(*gain, |g, _| add_slice(g.data_mut(), &dgain));
                self.acc(*bias, |g, _| add_slice(g.data_mut(), &dbias));
            }
            Op::Softmax(x) => {
                self.acc(*x, |g, n| {
                    let y = &n[this].value;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &dv) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o += yv * (dv - s);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                self.acc(*x, |g, _| {
                    for r in 0..dy.rows() {
                        add_slice(&mut g.row_mut(r)[start..start + dy.cols()], dy.row(r));
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.acc(*p, |g, _| {
                        for r in 0..dy.rows() {
                            add_slice(g.row_mut(r), &dy.row(r)[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.nodes[p.0].value.rows();
                    self.acc(*p, |g, _| {
                        for r in 0..h {
                            add_slice(g.row_mut(r), dy.row(off + r));
                        }
                    });
                    off += h;
                }
            }
            Op::Gather { table, ids } => {
                self.acc(*table, |g, _| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_slice(g.row_mut(i), dy.row(r));
                    }
                });
            }
            Op::BroadcastRows(row) => {
                self.acc(*row, |g, _| {
                    for r in 0..dy.rows() {
                        add_slice(g.data_mut(), dy.row(r));
                    }
                });
            }
            Op::MulConst { x, factor } => {
                self.acc(*x, |g, _| {
                    for ((o, v), f) in g.data_mut().iter_mut().zip(dy.data()).zip(factor.data()) {
                        *o += v * f;
                    }
                });
            }
            Op::WeightedNll { logits, targets, weights, probs } => {
                let up = dy.get(0, 0);
                self.acc(*logits, |g, _| {
                    for r in 0..probs.rows() {
                        let w = up * weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for (c, (o, p)) in g.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            *o += w * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{grad_check, GRAD_CHECK_FLOOR};
    use crate::rng::SplitMix64;

    /// Builds a small graph touching every op and returns (loss, leaf ids).
    fn graph(tape: &mut Tape, leaves: &[Matrix]) -> (NodeId, Vec<NodeId>) {
        let ids: Vec<NodeId> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let (x, w, b, gain, bias, table) = (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
        let g = tape.gather(table, &[2, 0, 2]);
        let xx = tape.concat_rows(&[x, g]);
        let ln = tape.layer_norm(xx, gain, bias, 1e-5).unwrap();
        let h = tape.linear(ln, w, b);
        let r = tape.relu(h);
        let s = tape.scale(r, 0.7);
        let att = tape.matmul_bt(s, s);
        let p = tape.softmax(att, true);
        let ctx = tape.matmul(p, s);
        let left = tape.slice_cols(ctx, 0, 2);
        let right = tape.slice_cols(ctx, 2, 2);
        let sum = tape.add(left, right);
        let bias_row = tape.slice_cols(b, 0, 2);
        let bc = tape.broadcast_rows(bias_row, 5);
        let sum = tape.add(sum, bc);
        let cat = tape.concat_cols(&[sum, left]);
        let mask = Matrix::from_vec(5, 4, (0..20).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect()).unwrap();
        let d = tape.mul_const(cat, mask);
        let loss = tape.weighted_nll(d, &[0, 3, 1, 2, 3], &[0.5, 1.0, 0.0, 2.0, 1.0]);
        (loss, ids)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = SplitMix64::new(11);
        let leaves = vec![
            Matrix::randn(2, 3, 1.0, &mut rng),
            Matrix::randn(3, 4, 0.8, &mut rng),
            Matrix::randn(1, 4, 0.5, &mut rng),
            Matrix::randn(1, 3, 1.0, &mut rng),
            Matrix::randn(1, 3, 0.5, &mut rng),
            Matrix::randn(4, 3, 1.0, &mut rng),
        ];
        let mut tape = Tape::new();
        let (loss, ids) = graph(&mut tape, &leaves);
        tape.backward(loss);
        for (li, id) in ids.iter().enumerate() {
            let analytic = tape.grad(*id).cloned().unwrap_or_else(|| Matrix::zeros(leaves[li].rows(), leaves[li].cols()));
            let err = grad_check(
                |theta| {
                    let mut ls = leaves.clone();
                    ls[li] = Matrix::from_vec(leaves[li].rows(), leaves[li].cols(), theta.to_vec()).unwrap();
                    let mut t = Tape::new();
                    let (l, _) = graph(&mut t, &ls);
                    t.value(l).get(0, 0)
                },
                leaves[li].data(),
                analytic.data(),
                1e-6,
                GRAD_CHECK_FLOOR,
            );
            assert!(err < 1e-5, "leaf {li}: rel err {err}");
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::filled(1, 2, 1.0));
        let w = tape.leaf(Matrix::filled(2, 2, 0.5));
        let y = tape.matmul(c, w);
        let loss = tape.weighted_nll(y, &[0], &[1.0]);
        tape.backward(loss);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(3, 3, 1.0));
        let p = tape.softmax(x, true);
        let v = tape.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert!((v.get(1, 0) - 0.5).abs() < 1e-15 && v.get(1, 2) == 0.0);
    }
}
