//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every executed operation in topological order. Calling
//! [`Tape::backward`] on a scalar loss replays the recorded backward rules in
//! reverse, accumulating gradients into every `requires_grad` leaf. A tape is
//! a single-threaded unit of work covering one training step; parameters live
//! outside the tape and are re-registered as leaves each step.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::csr::CsrMatrix;
use crate::tensor::dense::{self, DenseMatrix};
use crate::tensor::segment::SegmentIndex;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    /// Constant sparse left operand; only the dense right side gets a gradient.
    CsrMatmul {
        csr: Rc<CsrMatrix>,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
        broadcast_col: bool,
    },
    Scale {
        a: usize,
        k: f64,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    Elu {
        a: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    RowGather {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
    SegmentSum {
        a: usize,
        seg: Rc<SegmentIndex>,
    },
    SegmentMean {
        a: usize,
        seg: Rc<SegmentIndex>,
    },
    SegmentSoftmax {
        a: usize,
        seg: Rc<SegmentIndex>,
    },
    LogSoftmaxRows {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Rc<Vec<f64>>,
    },
    NllMasked {
        log_probs: usize,
        rows: Rc<Vec<usize>>,
        labels: Rc<Vec<usize>>,
    },
    SumSquares {
        a: usize,
    },
}

struct Node {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record so the tape can be reused for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: DenseMatrix, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: TensorId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` call; zeros if the tensor
    /// did not participate in the loss.
    pub fn grad(&self, id: TensorId) -> DenseMatrix {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => DenseMatrix::zeros(node.value.rows(), node.value.cols()),
        }
    }

    pub fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> TensorId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = dense::matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn csr_matmul(&mut self, csr: Rc<CsrMatrix>, b: TensorId) -> Result<TensorId> {
        let value = csr.matmul_dense(self.value(b))?;
        let rg = self.requires(b);
        Ok(self.push(value, rg, Op::CsrMatmul { csr, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product. `b` may be a single column, in which case each
    /// row of `a` is scaled by the matching entry of `b`.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast_col = vb.cols() == 1 && va.cols() != 1;
        if va.rows() != vb.rows() || (!broadcast_col && va.cols() != vb.cols()) {
            return Err(Error::dim(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut value = DenseMatrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let a_row = va.row(r);
            let out_row = r * va.cols();
            if broadcast_col {
                let s = vb.get(r, 0);
                for (c, &av) in a_row.iter().enumerate() {
                    value.values_mut()[out_row + c] = av * s;
                }
            } else {
                let b_row = vb.row(r);
                for (c, (&av, &bv)) in a_row.iter().zip(b_row).enumerate() {
                    value.values_mut()[out_row + c] = av * bv;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            value,
            rg,
            Op::Mul {
                a: a.0,
                b: b.0,
                broadcast_col,
            },
        ))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let value = self.value(a).map(|v| v * k);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale { a: a.0, k })
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.requires(a);
        self.push(value, rg, Op::LeakyRelu { a: a.0, slope })
    }

    pub fn elu(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        let rg = self.requires(a);
        self.push(value, rg, Op::Elu { a: a.0 })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ".to_string()));
        }
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = DenseMatrix::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            for r in 0..rows {
                let src = vp.row(r);
                let dst = r * total_cols + offset;
                value.values_mut()[dst..dst + src.len()].copy_from_slice(src);
            }
            offset += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            value,
            rg,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn row_gather(&mut self, a: TensorId, idx: Rc<Vec<usize>>) -> Result<TensorId> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::Index {
                index: bad,
                len: va.rows(),
            });
        }
        let mut value = DenseMatrix::zeros(idx.len(), va.cols());
        for (r, &src) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(va.row(src));
        }
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::RowGather { a: a.0, idx }))
    }

    pub fn segment_sum(&mut self, a: TensorId, seg: Rc<SegmentIndex>) -> Result<TensorId> {
        let va = self.value(a);
        if seg.len() != va.rows() {
            return Err(Error::dim(
                "segment_sum",
                format!("{} rows vs {} assignments", va.rows(), seg.len()),
            ));
        }
        let mut value = DenseMatrix::zeros(seg.num_groups(), va.cols());
        for (r, &g) in seg.groups().iter().enumerate() {
            let src = va.row(r);
            let dst = value.row_mut(g);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::SegmentSum { a: a.0, seg }))
    }

    pub fn segment_mean(&mut self, a: TensorId, seg: Rc<SegmentIndex>) -> Result<TensorId> {
        let va = self.value(a);
        if seg.len() != va.rows() {
            return Err(Error::dim(
                "segment_mean",
                format!("{} rows vs {} assignments", va.rows(), seg.len()),
            ));
        }
        let counts = seg.counts();
        let mut value = DenseMatrix::zeros(seg.num_groups(), va.cols());
        for (r, &g) in seg.groups().iter().enumerate() {
            let inv = 1.0 / counts[g] as f64;
            let src = va.row(r);
            let dst = value.row_mut(g);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * inv;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::SegmentMean { a: a.0, seg }))
    }

    /// Softmax normalized within each group of a single-column tensor, with
    /// per-group max subtraction for stability. Every group must be
    /// non-empty.
    pub fn segment_softmax(&mut self, a: TensorId, seg: Rc<SegmentIndex>) -> Result<TensorId> {
        let va = self.value(a);
        if va.cols() != 1 {
            return Err(Error::dim(
                "segment_softmax",
                format!("expected single column, got {} columns", va.cols()),
            ));
        }
        if seg.len() != va.rows() {
            return Err(Error::dim(
                "segment_softmax",
                format!("{} rows vs {} assignments", va.rows(), seg.len()),
            ));
        }
        if let Some(group) = seg.first_empty_group() {
            return Err(Error::DegenerateGroup { group });
        }
        let x = va.values();
        let mut maxes = vec![f64::NEG_INFINITY; seg.num_groups()];
        for (r, &g) in seg.groups().iter().enumerate() {
            maxes[g] = maxes[g].max(x[r]);
        }
        let mut out: Vec<f64> = seg
            .groups()
            .iter()
            .enumerate()
            .map(|(r, &g)| (x[r] - maxes[g]).exp())
            .collect();
        let mut sums = vec![0.0; seg.num_groups()];
        for (r, &g) in seg.groups().iter().enumerate() {
            sums[g] += out[r];
        }
        for (r, &g) in seg.groups().iter().enumerate() {
            out[r] /= sums[g];
        }
        let value = DenseMatrix::from_vec(x.len(), 1, out)?;
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::SegmentSoftmax { a: a.0, seg }))
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let mut value = DenseMatrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (c, &v) in row.iter().enumerate() {
                value.set(r, c, v - max - log_sum);
            }
        }
        let rg = self.requires(a);
        self.push(value, rg, Op::LogSoftmaxRows { a: a.0 })
    }

    /// Inverted dropout: kept entries are scaled by `1/keep_prob` during
    /// training; identity in evaluation mode or at `keep_prob == 1`.
    pub fn dropout<R: Rng>(
        &mut self,
        a: TensorId,
        keep_prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        if keep_prob <= 0.0 || keep_prob > 1.0 {
            return Err(Error::Config(format!(
                "dropout keep probability must be in (0, 1], got {keep_prob}"
            )));
        }
        if !training || keep_prob == 1.0 {
            return Ok(a);
        }
        let va = self.value(a);
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let mut value = va.clone();
        for (v, &m) in value.values_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.requires(a);
        Ok(self.push(
            value,
            rg,
            Op::Dropout {
                a: a.0,
                mask: Rc::new(mask),
            },
        ))
    }

    /// Negative mean log-likelihood of `labels` over the rows in `rows`.
    pub fn nll_masked(
        &mut self,
        log_probs: TensorId,
        rows: Rc<Vec<usize>>,
        labels: Rc<Vec<usize>>,
    ) -> Result<TensorId> {
        let lp = self.value(log_probs);
        if rows.is_empty() {
            return Err(Error::Usage("nll_masked with an empty mask".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::dim(
                "nll_masked",
                format!("{} rows vs {} labels", rows.len(), labels.len()),
            ));
        }
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(labels.iter()) {
            if r >= lp.rows() {
                return Err(Error::Index {
                    index: r,
                    len: lp.rows(),
                });
            }
            if y >= lp.cols() {
                return Err(Error::Index {
                    index: y,
                    len: lp.cols(),
                });
            }
            total -= lp.get(r, y);
        }
        let value = DenseMatrix::scalar(total / rows.len() as f64);
        let rg = self.requires(log_probs);
        Ok(self.push(
            value,
            rg,
            Op::NllMasked {
                log_probs: log_probs.0,
                rows,
                labels,
            },
        ))
    }

    /// Sum of squared entries, as a 1x1 tensor.
    pub fn sum_squares(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.value(a).values().iter().map(|&v| v * v).sum();
        let rg = self.requires(a);
        self.push(DenseMatrix::scalar(total), rg, Op::SumSquares { a: a.0 })
    }

    /// Test fixture: forward scales by `k` but records a backward rule for
    /// `2k`, so gradient checks must flag it.
    #[cfg(test)]
    pub(crate) fn scale_with_wrong_backward(&mut self, a: TensorId, k: f64) -> TensorId {
        let value = self.value(a).map(|v| v * k);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale { a: a.0, k: 2.0 * k })
    }

    fn grad_slot(&mut self, idx: usize) -> &mut DenseMatrix {
        let (rows, cols) = self.nodes[idx].value.shape();
        self.nodes[idx]
            .grad
            .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
    }

    /// Accumulates `d(loss)/d(leaf)` into every `requires_grad` leaf reachable
    /// from `loss`, which must be 1x1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        *self.grad_slot(loss.0) = DenseMatrix::scalar(1.0);

        for t in (0..=loss.0).rev() {
            if self.nodes[t].grad.is_none() || !self.nodes[t].requires_grad {
                continue;
            }
            let grad = self.nodes[t].grad.take().unwrap();
            self.apply_backward(t, &grad);
            self.nodes[t].grad = Some(grad);
        }
        Ok(())
    }

    fn apply_backward(&mut self, t: usize, grad: &DenseMatrix) {
        // Ops only reference earlier nodes, so splitting at t is safe.
        let (before, rest) = self.nodes.split_at_mut(t);
        let node = &rest[0];
        let value = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                if before[a].requires_grad {
                    let mut da =
                        DenseMatrix::zeros(before[a].value.rows(), before[a].value.cols());
                    dense::matmul_a_bt_into(grad, &before[b].value, &mut da);
                    let (rows, cols) = before[a].value.shape();
                    before[a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&da);
                }
                if before[b].requires_grad {
                    let mut db =
                        DenseMatrix::zeros(before[b].value.rows(), before[b].value.cols());
                    dense::matmul_at_b_into(&before[a].value, grad, &mut db);
                    let (rows, cols) = before[b].value.shape();
                    before[b]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&db);
                }
            }
            Op::CsrMatmul { csr, b } => {
                if before[*b].requires_grad {
                    let csr = Rc::clone(csr);
                    let (rows, cols) = before[*b].value.shape();
                    let gb = before[*b]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    csr.matmul_t_dense_into(grad, gb);
                }
            }
            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    if before[idx].requires_grad {
                        let (rows, cols) = before[idx].value.shape();
                        before[idx]
                            .grad
                            .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                            .add_assign(grad);
                    }
                }
            }
            Op::Mul {
                a,
                b,
                broadcast_col,
            } => {
                let (a, b, broadcast_col) = (*a, *b, *broadcast_col);
                if before[a].requires_grad {
                    let mut da = DenseMatrix::zeros(
                        before[a].value.rows(),
                        before[a].value.cols(),
                    );
                    let vb = &before[b].value;
                    for r in 0..da.rows() {
                        if broadcast_col {
                            let s = vb.get(r, 0);
                            for (d, &g) in da.row_mut(r).iter_mut().zip(grad.row(r)) {
                                *d = g * s;
                            }
                        } else {
                            for ((d, &g), &bv) in
                                da.row_mut(r).iter_mut().zip(grad.row(r)).zip(vb.row(r))
                            {
                                *d = g * bv;
                            }
                        }
                    }
                    let (rows, cols) = before[a].value.shape();
                    before[a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&da);
                }
                if before[b].requires_grad {
                    let va = &before[a].value;
                    let mut db =
                        DenseMatrix::zeros(before[b].value.rows(), before[b].value.cols());
                    for r in 0..va.rows() {
                        if broadcast_col {
                            let mut acc = 0.0;
                            for (&g, &av) in grad.row(r).iter().zip(va.row(r)) {
                                acc += g * av;
                            }
                            db.set(r, 0, acc);
                        } else {
                            for ((d, &g), &av) in
                                db.row_mut(r).iter_mut().zip(grad.row(r)).zip(va.row(r))
                            {
                                *d = g * av;
                            }
                        }
                    }
                    let (rows, cols) = before[b].value.shape();
                    before[b]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&db);
                }
            }
            Op::Scale { a, k } => {
                if before[*a].requires_grad {
                    let scaled = grad.map(|g| g * k);
                    let (rows, cols) = before[*a].value.shape();
                    before[*a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&scaled);
                }
            }
            Op::LeakyRelu { a, slope } => {
                if before[*a].requires_grad {
                    let (a, slope) = (*a, *slope);
                    let va = &before[a].value;
                    let mut da = DenseMatrix::zeros(va.rows(), va.cols());
                    for (i, (&x, &g)) in va.values().iter().zip(grad.values()).enumerate() {
                        da.values_mut()[i] = if x > 0.0 { g } else { g * slope };
                    }
                    let (rows, cols) = before[a].value.shape();
                    before[a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&da);
                }
            }
            Op::Elu { a } => {
                if before[*a].requires_grad {
                    let a = *a;
                    let va = &before[a].value;
                    let mut da = DenseMatrix::zeros(va.rows(), va.cols());
                    for (i, (&x, &g)) in va.values().iter().zip(grad.values()).enumerate() {
                        da.values_mut()[i] = if x > 0.0 { g } else { g * x.exp() };
                    }
                    let (rows, cols) = before[a].value.shape();
                    before[a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&da);
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for idx in parts {
                    let cols = before[idx].value.cols();
                    if before[idx].requires_grad {
                        let rows = before[idx].value.rows();
                        let mut dp = DenseMatrix::zeros(rows, cols);
                        for r in 0..rows {
                            let src = &grad.row(r)[offset..offset + cols];
                            dp.row_mut(r).copy_from_slice(src);
                        }
                        before[idx]
                            .grad
                            .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                            .add_assign(&dp);
                    }
                    offset += cols;
                }
            }
            Op::RowGather { a, idx } => {
                if before[*a].requires_grad {
                    let (rows, cols) = before[*a].value.shape();
                    let ga = before[*a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = ga.row_mut(src);
                        for (d, &g) in dst.iter_mut().zip(grad.row(r)) {
                            *d += g;
                        }
                    }
                }
            }
            Op::SegmentSum { a, seg } => {
                if before[*a].requires_grad {
                    let (rows, cols) = before[*a].value.shape();
                    let seg = Rc::clone(seg);
                    let ga = before[*a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    for (r, &g) in seg.groups().iter().enumerate() {
                        let dst = ga.row_mut(r);
                        for (d, &gv) in dst.iter_mut().zip(grad.row(g)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SegmentMean { a, seg } => {
                if before[*a].requires_grad {
                    let (rows, cols) = before[*a].value.shape();
                    let seg = Rc::clone(seg);
                    let counts = seg.counts();
                    let ga = before[*a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    for (r, &g) in seg.groups().iter().enumerate() {
                        let inv = 1.0 / counts[g] as f64;
                        let dst = ga.row_mut(r);
                        for (d, &gv) in dst.iter_mut().zip(grad.row(g)) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::SegmentSoftmax { a, seg } => {
                if before[*a].requires_grad {
                    let seg = Rc::clone(seg);
                    let y = value.values();
                    let g = grad.values();
                    // dx = y * (g - sum_group(g * y))
                    let mut dots = vec![0.0; seg.num_groups()];
                    for (r, &grp) in seg.groups().iter().enumerate() {
                        dots[grp] += g[r] * y[r];
                    }
                    let (rows, cols) = before[*a].value.shape();
                    let ga = before[*a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    for (r, &grp) in seg.groups().iter().enumerate() {
                        ga.values_mut()[r] += y[r] * (g[r] - dots[grp]);
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                if before[*a].requires_grad {
                    let a = *a;
                    let (rows, cols) = before[a].value.shape();
                    let mut da = DenseMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        let g_row = grad.row(r);
                        let y_row = value.row(r);
                        let g_sum: f64 = g_row.iter().sum();
                        for (c, (&g, &y)) in g_row.iter().zip(y_row).enumerate() {
                            da.set(r, c, g - y.exp() * g_sum);
                        }
                    }
                    before[a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&da);
                }
            }
            Op::Dropout { a, mask } => {
                if before[*a].requires_grad {
                    let mask = Rc::clone(mask);
                    let (rows, cols) = before[*a].value.shape();
                    let ga = before[*a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    for ((d, &g), &m) in
                        ga.values_mut().iter_mut().zip(grad.values()).zip(mask.iter())
                    {
                        *d += g * m;
                    }
                }
            }
            Op::NllMasked {
                log_probs,
                rows,
                labels,
            } => {
                if before[*log_probs].requires_grad {
                    let (rows_idx, labels) = (Rc::clone(rows), Rc::clone(labels));
                    let scale = grad.get(0, 0) / rows_idx.len() as f64;
                    let (rows, cols) = before[*log_probs].value.shape();
                    let ga = before[*log_probs]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                    for (&r, &y) in rows_idx.iter().zip(labels.iter()) {
                        let cur = ga.get(r, y);
                        ga.set(r, y, cur - scale);
                    }
                }
            }
            Op::SumSquares { a } => {
                if before[*a].requires_grad {
                    let a = *a;
                    let g = grad.get(0, 0);
                    let da = before[a].value.map(|x| 2.0 * g * x);
                    let (rows, cols) = before[a].value.shape();
                    before[a]
                        .grad
                        .get_or_insert_with(|| DenseMatrix::zeros(rows, cols))
                        .add_assign(&da);
                }
            }
        }
    }
}
