//! Matrix-valued reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints; only nodes downstream of a [`Tape::leaf`] carry gradients, values
//! entered with [`Tape::constant`] are never differentiated.

use std::collections::HashMap;
use std::sync::Arc;

use crate::linalg::{gemm_acc, Matrix};
use crate::mask::cxcywh_to_xyxy;
use crate::matching::losses::{giou_flagged, sigmoid, sigmoid_focal_loss, softplus, FocalParams, DICE_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    AddRow,
    Scale,
    MulConst,
    Relu,
    Sigmoid,
    SoftmaxRows,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    GatherRows,
    Sum,
    WeightedSum,
    FocalSum,
    L1Sum,
    GiouLossSum,
    DiceSum,
    SquaredErrorSum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    WeightedSum(Var, Matrix),
    FocalSum(Var, Matrix, FocalParams),
    L1Sum(Var, Matrix),
    GiouLossSum(Var, Matrix),
    DiceSum(Var, Matrix),
    SquaredErrorSum(Var, Matrix),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Sum(..) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
            Op::FocalSum(..) => OpKind::FocalSum,
            Op::L1Sum(..) => OpKind::L1Sum,
            Op::GiouLossSum(..) => OpKind::GiouLossSum,
            Op::DiceSum(..) => OpKind::DiceSum,
            Op::SquaredErrorSum(..) => OpKind::SquaredErrorSum,
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Active branch of every kinked entry (relu input > 0, L1 residual >= 0), keyed by node index.
pub type BranchRecord = HashMap<usize, Vec<bool>>;

#[derive(Default)]
enum Branches {
    #[default]
    Free,
    Record(BranchRecord),
    Pinned(Arc<BranchRecord>),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
    branches: Branches,
}

/// Adjoints of the leaves after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the leaf does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: multiplies the adjoint flowing through every `kind` node by
    /// `factor`, i.e. plants a wrong derivative that gradient checks must catch.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    /// Remember which side of its kink every relu and L1 entry lands on.
    pub fn record_branches(&mut self) {
        self.branches = Branches::Record(BranchRecord::new());
    }

    pub fn take_branches(&mut self) -> BranchRecord {
        match std::mem::take(&mut self.branches) {
            Branches::Record(r) => r,
            _ => BranchRecord::new(),
        }
    }

    /// Evaluate relu and L1 nodes on the recorded branch (its linear extension)
    /// instead of switching at the kink. A graph built in the same order as the
    /// recorded one is then smooth in its inputs, so finite differences taken
    /// near a kink still match the adjoint.
    pub fn pin_branches(&mut self, record: Arc<BranchRecord>) {
        self.branches = Branches::Pinned(record);
    }

    /// Branch flags for the node about to be pushed; `natural` gives the unpinned ones.
    fn branch(&mut self, natural: Vec<bool>) -> Vec<bool> {
        let idx = self.nodes.len();
        match &mut self.branches {
            Branches::Pinned(r) => r.get(&idx).cloned().unwrap_or(natural),
            Branches::Record(r) => {
                r.insert(idx, natural.clone());
                natural
            }
            Branches::Free => natural,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (am, b) = (self.value(a), self.value(bias));
        assert_eq!((1, am.cols()), b.shape(), "bias shape");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let av = self.value(a);
        assert_eq!((av.rows(), av.cols()), (m.rows(), m.cols()), "mul_const shape");
        let v = av.zip_map(&m, |x, y| x * y);
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, m), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = if matches!(self.branches, Branches::Free) {
            self.value(a).map(|x| x.max(0.0))
        } else {
            let natural = self.value(a).as_slice().iter().map(|&x| x > 0.0).collect();
            let on = self.branch(natural);
            let x = self.value(a);
            Matrix::from_vec(x.rows(), x.cols(), x.as_slice().iter().zip(&on).map(|(&x, &o)| if o { x } else { 0.0 }).collect())
        };
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row counts");
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column counts");
            data.extend_from_slice(m.as_slice());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m.cols());
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let v = Matrix::from_vec(idx.len(), m.cols(), data);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `Σ aᵢⱼ wᵢⱼ`.
    pub fn weighted_sum(&mut self, a: Var, w: Matrix) -> Var {
        assert_eq!(self.value(a).shape(), w.shape(), "weighted_sum shapes");
        let v = self.value(a).as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(v), Op::WeightedSum(a, w), ng)
    }

    /// Σ of sigmoid focal terms; `targets` holds 0/1 entries.
    pub fn focal_sum(&mut self, logits: Var, targets: Matrix, fp: FocalParams) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), targets.shape(), "focal_sum shapes");
        let v = l
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&x, &t)| sigmoid_focal_loss(x, t > 0.5, fp))
            .sum();
        let ng = self.ng(logits);
        self.push(Matrix::scalar(v), Op::FocalSum(logits, targets, fp), ng)
    }

    /// `Σ|aᵢ − tᵢ|`.
    pub fn l1_sum(&mut self, a: Var, target: Matrix) -> Var {
        assert_eq!(self.value(a).shape(), target.shape(), "l1_sum shapes");
        let v = if matches!(self.branches, Branches::Free) {
            self.value(a).as_slice().iter().zip(target.as_slice()).map(|(x, t)| (x - t).abs()).sum()
        } else {
            let natural = self.value(a).as_slice().iter().zip(target.as_slice()).map(|(x, t)| x >= t).collect();
            let pos = self.branch(natural);
            let x = self.value(a).as_slice();
            x.iter()
                .zip(target.as_slice())
                .zip(&pos)
                .map(|((x, t), &p)| if p { x - t } else { t - x })
                .sum()
        };
        let ng = self.ng(a);
        self.push(Matrix::scalar(v), Op::L1Sum(a, target), ng)
    }

    /// `Σ (1 − giou)` over rows of normalized `(cx, cy, w, h)` boxes.
    pub fn giou_loss_sum(&mut self, boxes: Var, targets: Matrix) -> Var {
        let b = self.value(boxes);
        assert_eq!(b.shape(), targets.shape(), "giou_loss_sum shapes");
        assert_eq!(b.cols(), 4, "boxes are n x 4");
        let v = (0..b.rows())
            .map(|r| 1.0 - giou_flagged(&cxcywh_to_xyxy(row4(b, r)), &cxcywh_to_xyxy(row4(&targets, r))).0)
            .sum();
        let ng = self.ng(boxes);
        self.push(Matrix::scalar(v), Op::GiouLossSum(boxes, targets), ng)
    }

    /// Row-wise dice loss `1 − (2Σpg + 1)/(Σp + Σg + 1)`, summed over rows.
    pub fn dice_sum(&mut self, pred: Var, targets: Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), targets.shape(), "dice_sum shapes");
        let v = (0..p.rows())
            .map(|r| {
                let (num, den) = dice_parts(p.row(r), targets.row(r));
                1.0 - num / den
            })
            .sum();
        let ng = self.ng(pred);
        self.push(Matrix::scalar(v), Op::DiceSum(pred, targets), ng)
    }

    /// `Σ (aᵢ − tᵢ)²`.
    pub fn squared_error_sum(&mut self, a: Var, target: Matrix) -> Var {
        assert_eq!(self.value(a).shape(), target.shape(), "squared_error_sum shapes");
        let v = self.value(a).as_slice().iter().zip(target.as_slice()).map(|(x, t)| (x - t).powi(2)).sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(v), Op::SquaredErrorSum(a, target), ng)
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        if !self.nodes[out.0].needs_grad {
            return Gradients { grads };
        }
        grads[out.0] = Some(Matrix::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    g.scale_in_place(factor);
                }
            }
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    gemm_acc(g, false, bv, true, 1.0, slot(grads, *a, av));
                }
                if self.ng(*b) {
                    gemm_acc(av, true, g, false, 1.0, slot(grads, *b, bv));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    gemm_acc(g, false, bv, false, 1.0, slot(grads, *a, av));
                }
                if self.ng(*b) {
                    gemm_acc(g, true, av, false, 1.0, slot(grads, *b, bv));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        slot(grads, v, g).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.ng(*a) {
                    slot(grads, *a, g).add_assign(g);
                }
                if self.ng(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias));
                    for r in 0..g.rows() {
                        for (x, y) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, k) => self.acc_elementwise(grads, *a, g, |_, gi, _| k * gi),
            Op::MulConst(a, m) => self.acc_elementwise(grads, *a, g, |i, gi, _| gi * m.as_slice()[i]),
            Op::Relu(a) => self.acc_elementwise(grads, *a, g, |i, gi, _| if y.as_slice()[i] > 0.0 { gi } else { 0.0 }),
            Op::Sigmoid(a) => self.acc_elementwise(grads, *a, g, |i, gi, _| {
                let s = y.as_slice()[i];
                gi * s * (1.0 - s)
            }),
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, y);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, self.value(*a));
                    for r in 0..g.rows() {
                        for (o, q) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += q;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.ng(p) {
                        let gp = slot(grads, p, pv);
                        for r in 0..g.rows() {
                            for (o, q) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + pv.cols()]) {
                                *o += q;
                            }
                        }
                    }
                    off += pv.cols();
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, self.value(*a));
                    let c = g.cols();
                    for (o, q) in ga.as_mut_slice()[start * c..(start + g.rows()) * c].iter_mut().zip(g.as_slice()) {
                        *o += q;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.ng(p) {
                        let gp = slot(grads, p, pv);
                        for (o, q) in gp.as_mut_slice().iter_mut().zip(&g.as_slice()[off..off + pv.len()]) {
                            *o += q;
                        }
                    }
                    off += pv.len();
                }
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, self.value(*a));
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, q) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += q;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc_elementwise(grads, *a, g, |_, _, _| s);
            }
            Op::WeightedSum(a, w) => {
                let s = g.item();
                self.acc_elementwise(grads, *a, g, |i, _, _| s * w.as_slice()[i]);
            }
            Op::FocalSum(a, t, fp) => {
                let s = g.item();
                self.acc_elementwise(grads, *a, g, |i, _, x| s * focal_grad(x, t.as_slice()[i] > 0.5, *fp));
            }
            Op::L1Sum(a, t) => {
                let s = g.item();
                self.acc_elementwise(grads, *a, g, |i, _, x| {
                    let d = x - t.as_slice()[i];
                    if d > 0.0 {
                        s
                    } else if d < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
            }
            Op::SquaredErrorSum(a, t) => {
                let s = g.item();
                self.acc_elementwise(grads, *a, g, |i, _, x| s * 2.0 * (x - t.as_slice()[i]));
            }
            Op::GiouLossSum(a, t) => {
                if self.ng(*a) {
                    let s = g.item();
                    let av = self.value(*a);
                    let ga = slot(grads, *a, av);
                    for r in 0..av.rows() {
                        let d = giou_grad_cxcywh(row4(av, r), row4(t, r));
                        for (o, q) in ga.row_mut(r).iter_mut().zip(d) {
                            *o -= s * q;
                        }
                    }
                }
            }
            Op::DiceSum(a, t) => {
                if self.ng(*a) {
                    let s = g.item();
                    let av = self.value(*a);
                    let ga = slot(grads, *a, av);
                    for r in 0..av.rows() {
                        let (num, den) = dice_parts(av.row(r), t.row(r));
                        for (o, gt) in ga.row_mut(r).iter_mut().zip(t.row(r)) {
                            *o += s * (num - 2.0 * gt * den) / (den * den);
                        }
                    }
                }
            }
        }
    }

    /// `grad[a]ᵢ += f(i, gᵢ, aᵢ)`; for scalar-output ops `g` is 1×1 and `gᵢ` is unused.
    fn acc_elementwise(
        &self,
        grads: &mut [Option<Matrix>],
        a: Var,
        g: &Matrix,
        f: impl Fn(usize, f64, f64) -> f64,
    ) {
        if !self.ng(a) {
            return;
        }
        let av = self.value(a);
        let scalar = g.len() == 1 && av.len() != 1;
        let ga = slot(grads, a, av);
        for (i, (o, &x)) in ga.as_mut_slice().iter_mut().zip(av.as_slice()).enumerate() {
            let gi = if scalar { 0.0 } else { g.as_slice()[i] };
            *o += f(i, gi, x);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn row4(m: &Matrix, r: usize) -> [f64; 4] {
    let s = m.row(r);
    [s[0], s[1], s[2], s[3]]
}

fn dice_parts(p: &[f64], g: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sg: f64 = g.iter().sum();
    (2.0 * inter + DICE_EPS, sp + sg + DICE_EPS)
}

/// d/dx of the sigmoid focal loss at logit `x`.
pub fn focal_grad(x: f64, target: bool, fp: FocalParams) -> f64 {
    let p = sigmoid(x);
    if target {
        fp.alpha * (1.0 - p).powf(fp.gamma) * (-fp.gamma * p * softplus(-x) - (1.0 - p))
    } else {
        (1.0 - fp.alpha) * p.powf(fp.gamma) * (fp.gamma * (1.0 - p) * softplus(x) + p)
    }
}

/// Gradient of `giou(pred, target)` with respect to the `(cx, cy, w, h)` of `pred`.
pub fn giou_grad_cxcywh(pred: [f64; 4], target: [f64; 4]) -> [f64; 4] {
    let a = cxcywh_to_xyxy(pred);
    let b = cxcywh_to_xyxy(target);
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let area_a = aw * ah;
    let area_b = b.area();
    if area_a <= 0.0 && area_b <= 0.0 {
        return [0.0; 4];
    }
    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let c = cw * ch;

    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / c;
    let d_area = -inter / (union * union) + 1.0 / c;
    let d_c = -union / (c * c);

    let live_x = if iw_raw > 0.0 { 1.0 } else { 0.0 };
    let live_y = if ih_raw > 0.0 { 1.0 } else { 0.0 };
    // partials of (inter, area_a, enclosing) with respect to x1, y1, x2, y2
    let di = [
        -ih * live_x * f64::from(a.x1 > b.x1),
        -iw * live_y * f64::from(a.y1 > b.y1),
        ih * live_x * f64::from(a.x2 < b.x2),
        iw * live_y * f64::from(a.y2 < b.y2),
    ];
    let da = [-ah, -aw, ah, aw];
    let dc = [
        -ch * f64::from(a.x1 < b.x1),
        -cw * f64::from(a.y1 < b.y1),
        ch * f64::from(a.x2 > b.x2),
        cw * f64::from(a.y2 > b.y2),
    ];
    let gx: Vec<f64> = (0..4).map(|k| d_inter * di[k] + d_area * da[k] + d_c * dc[k]).collect();
    [gx[0] + gx[2], gx[1] + gx[3], 0.5 * (gx[2] - gx[0]), 0.5 * (gx[3] - gx[1])]
}

/// Relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference check of every input entry of a scalar function built on a fresh tape.
///
/// Returns the largest relative error over all entries.
pub fn check_gradients(
    inputs: &[Matrix],
    h: f64,
    fault: Option<(OpKind, f64)>,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[Matrix]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
        let out = build(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = Tape::new();
    if let Some((k, f)) = fault {
        t.inject_fault(k, f);
    }
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let out = build(&mut t, &vars);
    let grads = t.backward(out);
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (n, &v) in vars.iter().enumerate() {
        for i in 0..xs[n].len() {
            let orig = xs[n].as_slice()[i];
            xs[n].as_mut_slice()[i] = orig + h;
            let up = eval(&xs);
            xs[n].as_mut_slice()[i] = orig - h;
            let down = eval(&xs);
            xs[n].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(v).map_or(0.0, |g| g.as_slice()[i]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_loss() {
        // f(x) = Σ x², exact central differences
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]);
        let err = check_gradients(std::slice::from_ref(&x), 1e-5, None, |t, v| t.squared_error_sum(v[0], Matrix::zeros(1, 3)));
        assert!(err < 1e-9, "{err}");
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = t.squared_error_sum(v, Matrix::zeros(1, 3));
        let g = t.backward(out);
        assert_eq!(g.get(v).unwrap(), &x.map(|a| 2.0 * a));
    }

    #[test]
    fn matmul_and_friends() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let w = rand_mat(&mut rng, 3, 2);
        let err = check_gradients(&[a.clone(), b], 1e-5, None, |t, v| {
            let c = t.matmul(v[0], v[1]);
            t.weighted_sum(c, w.clone())
        });
        assert!(err < 1e-8, "matmul {err}");
        let b2 = rand_mat(&mut rng, 5, 4);
        let w2 = rand_mat(&mut rng, 3, 5);
        let err = check_gradients(&[a, b2], 1e-5, None, |t, v| {
            let c = t.matmul_nt(v[0], v[1]);
            t.weighted_sum(c, w2.clone())
        });
        assert!(err < 1e-8, "matmul_nt {err}");
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(rand_mat(&mut rng, 4, 6).map(|v| 50.0 * v));
        let s = t.softmax_rows(x);
        for r in 0..4 {
            let row = t.value(s).row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(2, 2, 1.0));
        let c = t.constant(Matrix::filled(2, 2, 3.0));
        let unused = t.leaf(Matrix::filled(1, 1, 5.0));
        let m = t.matmul(a, c);
        let out = t.sum(m);
        let g = t.backward(out);
        assert!(g.get(c).is_none());
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(a).unwrap(), &Matrix::filled(2, 2, 6.0));
    }

    #[test]
    fn shared_inputs_accumulate() {
        // f(x) = Σ (x + x) = 2Σx
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 3, 0.7));
        let y = t.add(x, x);
        let out = t.sum(y);
        assert_eq!(t.backward(out).get(x).unwrap(), &Matrix::filled(2, 3, 2.0));
    }

    #[test]
    fn focal_grad_matches_difference() {
        let fp = FocalParams::default();
        for x in [-7.0, -1.3, 0.0, 0.4, 5.5] {
            for tgt in [false, true] {
                let h = 1e-6;
                let n = (sigmoid_focal_loss(x + h, tgt, fp) - sigmoid_focal_loss(x - h, tgt, fp)) / (2.0 * h);
                assert!(rel_err(focal_grad(x, tgt, fp), n) < 1e-7);
            }
        }
    }

    #[test]
    fn giou_grad_cases() {
        // no coordinate sits on a kink and every partial is non-zero
        let cases = [
            ([0.5, 0.5, 0.3, 0.4], [0.57, 0.56, 0.25, 0.3]),
            ([0.2, 0.2, 0.1, 0.1], [0.7, 0.8, 0.2, 0.3]),
            ([0.5, 0.5, 0.6, 0.6], [0.62, 0.35, 0.5, 0.4]),
        ];
        for (p, q) in cases {
            let tm = Matrix::from_vec(1, 4, q.to_vec());
            let err = check_gradients(&[Matrix::from_vec(1, 4, p.to_vec())], 1e-6, None, |t, v| {
                t.giou_loss_sum(v[0], tm.clone())
            });
            assert!(err < 1e-7, "{p:?} {q:?}: {err}");
        }
    }

    #[test]
    fn fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 2, 3);
        let build = |t: &mut Tape, v: &[Var]| {
            let s = t.sigmoid(v[0]);
            t.sum(s)
        };
        assert!(check_gradients(std::slice::from_ref(&a), 1e-5, None, build) < 1e-8);
        assert!(check_gradients(&[a], 1e-5, Some((OpKind::Sigmoid, 1.01)), build) > 1e-3);
    }

    #[test]
    fn pinned_branches_smooth_out_kinks() {
        // x0 sits inside ±h of both kinks; analytic d/dx0 = 1 (relu) + 1 (|x|)
        let (x0, h) = (3e-6, 1e-5);
        let build = |t: &mut Tape, x: f64| {
            let v = t.leaf(Matrix::from_rows(&[vec![x, -0.5]]));
            let r = t.relu(v);
            let rs = t.sum(r);
            let l = t.l1_sum(v, Matrix::zeros(1, 2));
            let both = t.concat_cols(&[rs, l]);
            (v, t.sum(both))
        };
        let mut t = Tape::new();
        t.record_branches();
        let (v, out) = build(&mut t, x0);
        let analytic = t.backward(out).get(v).unwrap()[(0, 0)];
        assert_eq!(analytic, 2.0);
        let record = Arc::new(t.take_branches());
        let eval = |x: f64, pin: bool| {
            let mut t = Tape::new();
            if pin {
                t.pin_branches(record.clone());
            }
            let (_, out) = build(&mut t, x);
            t.value(out).item()
        };
        let free = (eval(x0 + h, false) - eval(x0 - h, false)) / (2.0 * h);
        let pinned = (eval(x0 + h, true) - eval(x0 - h, true)) / (2.0 * h);
        assert!((free - analytic).abs() > 0.5);
        assert!((pinned - analytic).abs() < 1e-9, "{pinned}");
        // pinning leaves values at the recorded point unchanged
        assert_eq!(eval(x0, true), eval(x0, false));
    }
}
