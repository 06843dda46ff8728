//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Operations are appended to a [`Tape`] during the forward pass and replayed
//! in reverse by [`Tape::backward`]. Shape mismatches inside the tape are
//! programming errors and panic; public model entry points validate their
//! inputs before recording anything.

use std::ops::Range;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
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
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Clamp(Var, f64, f64),
    ClampRange(Var, Tensor2, Tensor2),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SegmentSoftmax(Var, Vec<Range<usize>>),
    SegmentWeightedSum(Var, Var, Vec<Range<usize>>),
    BatchedMatVec(Var, Var),
}

/// One recorded value together with the operation that produced it.
#[derive(Debug)]
pub struct GradNode {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

impl GradNode {
    pub fn value(&self) -> &Tensor2 {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor2 {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<GradNode>,
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

    pub fn node(&self, v: Var) -> &GradNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(GradNode {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` as a constant; gradients stop here.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dimensions");
        let mut out = Tensor2::zeros(va.rows(), vb.cols());
        matmul_acc(va, vb, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .expect("elementwise shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    /// `a + row`, broadcasting a 1xm row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.rows() == 1 && vr.cols() == va.cols(), "add_row shapes");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a * row`, broadcasting a 1xm row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.rows() == 1 && vr.cols() == va.cols(), "mul_row shapes");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `a * col`, scaling row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert!(vc.cols() == 1 && vc.rows() == va.rows(), "mul_col shapes");
        let mut out = va.clone();
        for r in 0..out.rows() {
            let s = vc.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a + c` for a scalar constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise clamp into `[lo, hi]` given as constant tensors.
    pub fn clamp_range(&mut self, a: Var, lo: Tensor2, hi: Tensor2) -> Var {
        let va = self.value(a);
        assert!(va.same_shape(&lo) && va.same_shape(&hi), "clamp_range shapes");
        let data = va
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&x, (&l, &h))| x.max(l).min(h))
            .collect();
        let out = Tensor2::from_vec(va.rows(), va.cols(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::ClampRange(a, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor2::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.row_mut(r)
                .copy_from_slice(&super::tensor::softmax(va.row(r)));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor2::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.row_mut(r)
                .copy_from_slice(&super::tensor::log_softmax(va.row(r)));
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor2::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor2::scalar(va.sum() / va.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Per-row sums as an nx1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor2::col_vector((0..va.rows()).map(|r| va.row(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Row-wise dot products of two equally shaped matrices, as an nx1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "row_dot shapes");
        let out = Tensor2::col_vector((0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowDot(a, b), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows(), rows, "concat_cols row counts");
                out.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
                offset += vp.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows column counts");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let out = Tensor2::from_vec(rows, cols, data).expect("consistent");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols(), "slice_cols bounds");
        let mut out = Tensor2::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape size");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Softmax of an nx1 column computed independently within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols(), 1, "segment_softmax expects a column");
        let mut out = Tensor2::zeros(va.rows(), 1);
        for seg in segments {
            let p = super::tensor::softmax(&va.data()[seg.clone()]);
            out.data_mut()[seg.clone()].copy_from_slice(&p);
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentSoftmax(a, segments.to_vec()), rg)
    }

    /// Row `s` of the result is `sum_{j in segments[s]} weights[j] * items[j]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        items: Var,
        segments: &[Range<usize>],
    ) -> Var {
        let (vw, vi) = (self.value(weights), self.value(items));
        assert!(vw.cols() == 1 && vw.rows() == vi.rows(), "segment_weighted_sum shapes");
        let k = vi.cols();
        let mut out = Tensor2::zeros(segments.len(), k);
        for (s, seg) in segments.iter().enumerate() {
            for j in seg.clone() {
                let w = vw.data()[j];
                for (o, x) in out.row_mut(s).iter_mut().zip(vi.row(j)) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(items);
        self.push(
            out,
            Op::SegmentWeightedSum(weights, items, segments.to_vec()),
            rg,
        )
    }

    /// Row `b` of `wflat` holds a row-major kxk matrix `W_b`; row `b` of the
    /// result is `W_b x_b`.
    pub fn batched_matvec(&mut self, wflat: Var, x: Var) -> Var {
        let (vw, vx) = (self.value(wflat), self.value(x));
        let k = vx.cols();
        assert!(vw.rows() == vx.rows() && vw.cols() == k * k, "batched_matvec shapes");
        let mut out = Tensor2::zeros(vx.rows(), k);
        for b in 0..vx.rows() {
            let w = vw.row(b);
            let xb = vx.row(b);
            for i in 0..k {
                out.row_mut(b)[i] = dot(&w[i * k..(i + 1) * k], xb);
            }
        }
        let rg = self.rg(wflat) || self.rg(x);
        self.push(out, Op::BatchedMatVec(wflat, x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &GradNode, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b);
                    let ga = slot(grads, self, *a);
                    matmul_nt_acc(g, vb, ga);
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let gb = slot(grads, self, *b);
                    matmul_tn_acc(va, g, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for (o, x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, x), w) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * w;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, x), w) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * w;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for ((o, x), w) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(vr.data()) {
                            *o += x * w;
                        }
                    }
                });
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for ((o, x), w) in gr.data_mut().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *o += x * w;
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let s = vc.data()[r];
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += x * s;
                        }
                    }
                });
                self.acc(grads, *col, |gc| {
                    for r in 0..g.rows() {
                        gc.data_mut()[r] += dot(g.row(r), va.row(r));
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| {
                for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += s * x;
                }
            }),
            Op::Offset(a) => self.acc(grads, *a, |ga| ga.add_assign(g)),
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for ((o, x), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += x * (1.0 - t * t);
                }
            }),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                })
            }
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for ((o, x), e) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += x * e;
                }
            }),
            Op::Square(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += 2.0 * v * x;
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if *v >= *lo && *v <= *hi {
                            *o += x;
                        }
                    }
                })
            }
            Op::ClampRange(a, lo, hi) => {
                let va = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for (i, (o, x)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let v = va.data()[i];
                        if v >= lo.data()[i] && v <= hi.data()[i] {
                            *o += x;
                        }
                    }
                })
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                // Ties route the gradient to the first operand.
                let pick_a: Vec<bool> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, z)| if is_max { x >= z } else { x <= z })
                    .collect();
                self.acc(grads, *a, |ga| {
                    for (i, (o, x)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if pick_a[i] {
                            *o += x;
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (i, (o, x)) in gb.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if !pick_a[i] {
                            *o += x;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => self.acc(grads, *a, |ga| {
                for r in 0..y.rows() {
                    softmax_vjp(y.row(r), g.row(r), ga.row_mut(r));
                }
            }),
            Op::LogSoftmaxRows(a) => self.acc(grads, *a, |ga| {
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, x), ly) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o += x - ly.exp() * gsum;
                    }
                }
            }),
            Op::SegmentSoftmax(a, segments) => self.acc(grads, *a, |ga| {
                for seg in segments {
                    softmax_vjp(
                        &y.data()[seg.clone()],
                        &g.data()[seg.clone()],
                        &mut ga.data_mut()[seg.clone()],
                    );
                }
            }),
            Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += s;
                    }
                })
            }
            Op::Mean(a) => {
                let s = g.item() / self.value(*a).len() as f64;
                self.acc(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += s;
                    }
                })
            }
            Op::SumRows(a) => self.acc(grads, *a, |ga| {
                for r in 0..ga.rows() {
                    let s = g.data()[r];
                    for o in ga.row_mut(r) {
                        *o += s;
                    }
                }
            }),
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for r in 0..ga.rows() {
                        let s = g.data()[r];
                        for (o, x) in ga.row_mut(r).iter_mut().zip(vb.row(r)) {
                            *o += s * x;
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for r in 0..gb.rows() {
                        let s = g.data()[r];
                        for (o, x) in gb.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o += s * x;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for r in 0..gp.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| {
                        for (o, x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += x;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => self.acc(grads, *a, |ga| {
                for r in 0..g.rows() {
                    for (o, x) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }),
            Op::Reshape(a) => self.acc(grads, *a, |ga| {
                for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
            }),
            Op::SegmentWeightedSum(w, items, segments) => {
                let (vw, vi) = (self.value(*w), self.value(*items));
                self.acc(grads, *w, |gw| {
                    for (s, seg) in segments.iter().enumerate() {
                        for j in seg.clone() {
                            gw.data_mut()[j] += dot(g.row(s), vi.row(j));
                        }
                    }
                });
                self.acc(grads, *items, |gi| {
                    for (s, seg) in segments.iter().enumerate() {
                        for j in seg.clone() {
                            let wj = vw.data()[j];
                            for (o, x) in gi.row_mut(j).iter_mut().zip(g.row(s)) {
                                *o += wj * x;
                            }
                        }
                    }
                });
            }
            Op::BatchedMatVec(wflat, x) => {
                let (vw, vx) = (self.value(*wflat), self.value(*x));
                let k = vx.cols();
                self.acc(grads, *wflat, |gw| {
                    for b in 0..vx.rows() {
                        let gb = g.row(b);
                        let xb = vx.row(b);
                        let row = gw.row_mut(b);
                        for i in 0..k {
                            for j in 0..k {
                                row[i * k + j] += gb[i] * xb[j];
                            }
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    for b in 0..vx.rows() {
                        let gb = g.row(b);
                        let wb = vw.row(b);
                        let row = gx.row_mut(b);
                        for i in 0..k {
                            for j in 0..k {
                                row[j] += wb[i * k + j] * gb[i];
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor2>], v: Var, f: impl FnOnce(&mut Tensor2)) {
        if self.rg(v) {
            f(slot(grads, self, v));
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor2>], tape: &Tape, v: Var) -> &'g mut Tensor2 {
    grads[v.0].get_or_insert_with(|| {
        let (r, c) = tape.value(v).shape();
        Tensor2::zeros(r, c)
    })
}

fn softmax_vjp(y: &[f64], g: &[f64], out: &mut [f64]) {
    let inner = dot(y, g);
    for ((o, yi), gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - inner);
    }
}
