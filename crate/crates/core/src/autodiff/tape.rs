//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Every primitive appends a node to the tape arena, so node order is already
//! a topological order and `backward` is a single reverse sweep. A tape is
//! built per forward pass and dropped afterwards.

use std::ops::Range;
use std::rc::Rc;

use super::matrix::{gemm, GemmSide, Matrix};
use crate::error::{Error, Result};

/// Lower bound of the probability clamp used by cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges, one per segment (e.g. one per user).
pub type Segments = Rc<[Range<usize>]>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MulCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    SoftmaxVector(Var),
    RowSoftmaxPrefix(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum(Var, Var, Segments),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    Column(Var, usize),
    ConcatCols(Var, Var),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    InnerProduct(Var, Var),
    Element(Var, usize),
    Bce(Var, Rc<[f64]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::MulCol(..) => "mul_col",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxVector(..) => "softmax_vector",
            Op::RowSoftmaxPrefix(..) => "row_softmax_prefix",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentWeightedSum(..) => "segment_weighted_sum",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Column(..) => "column",
            Op::ConcatCols(..) => "concat_cols",
            Op::RowDot(..) => "row_dot",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::InnerProduct(..) => "inner_product",
            Op::Element(..) => "element",
            Op::Bce(..) => "bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

/// `dx = y * (g - <g, y>)` for a softmax output `y`.
fn softmax_backward(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d = yi * (gi - dot);
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`; zeros when none reached `v`.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(value, Op::Hadamard(a, b), &[a, b]))
    }

    /// Adds a `1 x k` row to every row of an `n x k` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::dim("add_row", sa, sr));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push_op(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    /// Multiplies a matrix by a `1 x 1` node.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim("scale_by", self.shape(s), self.shape(a)));
        }
        let c = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * c);
        Ok(self.push_op(value, Op::ScaleBy(s, a), &[s, a]))
    }

    /// Scales row `i` of an `n x k` matrix by entry `i` of an `n x 1` column.
    pub fn mul_col(&mut self, col: Var, a: Var) -> Result<Var> {
        let (sc, sa) = (self.shape(col), self.shape(a));
        if sc.1 != 1 || sc.0 != sa.0 {
            return Err(Error::dim("mul_col", sc, sa));
        }
        let mut value = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, ci) in c.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= ci);
        }
        Ok(self.push_op(value, Op::MulCol(col, a), &[col, a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push_op(value, Op::Softplus(a), &[a])
    }

    /// Softmax over all entries of a row or column vector.
    pub fn softmax_vector(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if !m.is_vector() || m.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "softmax_vector needs a non-empty vector, got {:?}",
                m.shape()
            )));
        }
        let mut value = m.clone();
        softmax_in_place(value.data_mut());
        Ok(self.push_op(value, Op::SoftmaxVector(a), &[a]))
    }

    /// Row-wise softmax restricted to the first `lens[i]` entries of row `i`;
    /// the remaining entries are exactly zero.
    pub fn row_softmax_prefix(&mut self, a: Var, lens: Rc<[usize]>) -> Result<Var> {
        let m = self.value(a);
        if lens.len() != m.rows() || lens.iter().any(|&l| l == 0 || l > m.cols()) {
            return Err(Error::InvalidArgument(format!(
                "row_softmax_prefix: lengths must be in 1..={} for each of {} rows",
                m.cols(),
                m.rows()
            )));
        }
        let mut value = m.clone();
        for (i, &len) in lens.iter().enumerate() {
            let row = value.row_mut(i);
            softmax_in_place(&mut row[..len]);
            row[len..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.push_op(value, Op::RowSoftmaxPrefix(a, lens), &[a]))
    }

    fn check_segments(&self, op: &'static str, n: usize, segs: &[Range<usize>]) -> Result<()> {
        let mut next = 0;
        for s in segs {
            if s.start != next || s.end <= s.start {
                return Err(Error::InvalidArgument(format!(
                    "{op}: segments must be non-empty and contiguous"
                )));
            }
            next = s.end;
        }
        if next != n {
            return Err(Error::InvalidArgument(format!(
                "{op}: segments cover {next} rows, expected {n}"
            )));
        }
        Ok(())
    }

    /// Softmax of an `n x 1` column independently within each segment.
    pub fn segment_softmax(&mut self, a: Var, segs: Segments) -> Result<Var> {
        let (n, c) = self.shape(a);
        if c != 1 {
            return Err(Error::dim("segment_softmax", (n, c), (n, 1)));
        }
        self.check_segments("segment_softmax", n, &segs)?;
        let mut value = self.value(a).clone();
        for s in segs.iter() {
            softmax_in_place(&mut value.data_mut()[s.clone()]);
        }
        Ok(self.push_op(value, Op::SegmentSoftmax(a, segs), &[a]))
    }

    /// `out[s] = sum_{i in s} w[i] * x[i, :]` for each segment `s`.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var, segs: Segments) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.1 != 1 || sw.0 != sx.0 {
            return Err(Error::dim("segment_weighted_sum", sw, sx));
        }
        self.check_segments("segment_weighted_sum", sx.0, &segs)?;
        let (wm, xm) = (self.value(w), self.value(x));
        let mut value = Matrix::zeros(segs.len(), sx.1);
        for (k, s) in segs.iter().enumerate() {
            let out = value.row_mut(k);
            for i in s.clone() {
                let wi = wm.data()[i];
                for (o, v) in out.iter_mut().zip(xm.row(i)) {
                    *o += wi * v;
                }
            }
        }
        Ok(self.push_op(value, Op::SegmentWeightedSum(w, x, segs), &[w, x]))
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: row {bad} out of {} rows",
                m.rows()
            )));
        }
        let value = m.gather_rows(&index);
        Ok(self.push_op(value, Op::GatherRows(a, index), &[a]))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.len() != rows * cols {
            return Err(Error::dim("reshape", m.shape(), (rows, cols)));
        }
        let value = Matrix::from_vec(rows, cols, m.data().to_vec())?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let m = self.value(a);
        if j >= m.cols() {
            return Err(Error::dim("column", m.shape(), (m.rows(), j + 1)));
        }
        let data = (0..m.rows()).map(|i| m.get(i, j)).collect::<Vec<_>>();
        let value = Matrix::col_vector(&data);
        Ok(self.push_op(value, Op::Column(a, j), &[a]))
    }

    /// Side-by-side concatenation: `n x p` and `n x q` give `n x (p + q)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::dim("concat_cols", sa, sb));
        }
        let (ma, mb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(sa.0 * (sa.1 + sb.1));
        for i in 0..sa.0 {
            data.extend_from_slice(ma.row(i));
            data.extend_from_slice(mb.row(i));
        }
        let value = Matrix::from_vec(sa.0, sa.1 + sb.1, data)?;
        Ok(self.push_op(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Row-wise inner products: `n x k`, `n x k` give `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ma, mb) = (self.value(a), self.value(b));
        let data = (0..ma.rows())
            .map(|i| ma.row(i).iter().zip(mb.row(i)).map(|(x, y)| x * y).sum())
            .collect::<Vec<f64>>();
        let value = Matrix::col_vector(&data);
        Ok(self.push_op(value, Op::RowDot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if !ma.is_vector() || !mb.is_vector() || ma.len() != mb.len() {
            return Err(Error::dim("inner_product", ma.shape(), mb.shape()));
        }
        let dot = ma.data().iter().zip(mb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push_op(Matrix::scalar(dot), Op::InnerProduct(a, b), &[a, b]))
    }

    /// Entry at flat row-major index `k`, as a `1 x 1` node.
    pub fn element(&mut self, a: Var, k: usize) -> Result<Var> {
        let m = self.value(a);
        if k >= m.len() {
            return Err(Error::InvalidArgument(format!(
                "element {k} out of {:?}",
                m.shape()
            )));
        }
        let value = Matrix::scalar(m.data()[k]);
        Ok(self.push_op(value, Op::Element(a, k), &[a]))
    }

    /// Mean negated Bernoulli log-likelihood of probabilities `p` against
    /// 0/1 labels, with `p` clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, labels: Rc<[f64]>) -> Result<Var> {
        let m = self.value(p);
        if m.len() != labels.len() || m.is_empty() {
            return Err(Error::dim("bce", m.shape(), (labels.len(), 1)));
        }
        let total: f64 = m
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let value = Matrix::scalar(total / labels.len() as f64);
        Ok(self.push_op(value, Op::Bce(p, labels), &[p]))
    }

    /// Reverse sweep from a `1 x 1` loss. Gradients from earlier sweeps are
    /// discarded; contributions through fan-out add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, delta: Matrix) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &Matrix) {
        let out = &self.nodes[i].value;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let bv = &self.nodes[b.0].value;
                    let mut da = Matrix::zeros(g.rows(), bv.rows());
                    gemm(GemmSide::new(g, false), GemmSide::new(bv, true), &mut da, 0.0);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let av = &self.nodes[a.0].value;
                    let mut db = Matrix::zeros(av.cols(), g.cols());
                    gemm(GemmSide::new(av, true), GemmSide::new(g, false), &mut db, 0.0);
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(b, g.map(|x| -x));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(a) {
                    let d = g.zip_map(&self.nodes[b.0].value, |x, y| x * y);
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = g.zip_map(&self.nodes[a.0].value, |x, y| x * y);
                    self.accumulate(b, d);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(row) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(row, d);
                }
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::ScaleBy(s, a) => {
                if self.wants(s) {
                    let av = &self.nodes[a.0].value;
                    let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    self.accumulate(s, Matrix::scalar(ds));
                }
                if self.wants(a) {
                    let c = self.nodes[s.0].value.data()[0];
                    self.accumulate(a, g.map(|x| x * c));
                }
            }
            Op::MulCol(col, a) => {
                if self.wants(col) {
                    let av = &self.nodes[a.0].value;
                    let d = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect::<Vec<f64>>();
                    self.accumulate(col, Matrix::col_vector(&d));
                }
                if self.wants(a) {
                    let c = self.nodes[col.0].value.data().to_vec();
                    let mut d = g.clone();
                    for (r, cr) in c.iter().enumerate() {
                        d.row_mut(r).iter_mut().for_each(|v| *v *= cr);
                    }
                    self.accumulate(a, d);
                }
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gi, y| gi * y * (1.0 - y));
                self.accumulate(a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gi, y| gi * (1.0 - y * y));
                self.accumulate(a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(&self.nodes[a.0].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(&self.nodes[a.0].value, |gi, x| gi * sigmoid(x));
                self.accumulate(a, d);
            }
            Op::SoftmaxVector(a) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                softmax_backward(out.data(), g.data(), d.data_mut());
                self.accumulate(a, d);
            }
            Op::RowSoftmaxPrefix(a, ref lens) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for (r, &len) in lens.iter().enumerate() {
                    softmax_backward(&out.row(r)[..len], &g.row(r)[..len], &mut d.row_mut(r)[..len]);
                }
                self.accumulate(a, d);
            }
            Op::SegmentSoftmax(a, ref segs) => {
                let mut d = Matrix::zeros(g.rows(), 1);
                for s in segs.iter() {
                    softmax_backward(
                        &out.data()[s.clone()],
                        &g.data()[s.clone()],
                        &mut d.data_mut()[s.clone()],
                    );
                }
                self.accumulate(a, d);
            }
            Op::SegmentWeightedSum(w, x, ref segs) => {
                let wv = &self.nodes[w.0].value;
                let xv = &self.nodes[x.0].value;
                let dw = if self.wants(w) {
                    let mut dw = Matrix::zeros(wv.rows(), 1);
                    for (k, s) in segs.iter().enumerate() {
                        for r in s.clone() {
                            dw.data_mut()[r] =
                                g.row(k).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                        }
                    }
                    Some(dw)
                } else {
                    None
                };
                let dx = if self.wants(x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, s) in segs.iter().enumerate() {
                        for r in s.clone() {
                            let wr = wv.data()[r];
                            for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o = wr * v;
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                if let Some(dw) = dw {
                    self.accumulate(w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
            }
            Op::GatherRows(a, ref index) => {
                let (rows, cols) = self.shape(a);
                let mut d = Matrix::zeros(rows, cols);
                for (k, &r) in index.iter().enumerate() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(a, d);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(a);
                let d = Matrix::from_vec(rows, cols, g.data().to_vec()).expect("reshape size");
                self.accumulate(a, d);
            }
            Op::Column(a, j) => {
                let (rows, cols) = self.shape(a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.set(r, j, g.data()[r]);
                }
                self.accumulate(a, d);
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(a).1;
                let q = g.cols() - p;
                if self.wants(a) {
                    let mut d = Matrix::zeros(g.rows(), p);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[..p]);
                    }
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let mut d = Matrix::zeros(g.rows(), q);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[p..]);
                    }
                    self.accumulate(b, d);
                }
            }
            Op::RowDot(a, b) => {
                let scale_rows = |m: &Matrix| {
                    let mut d = m.clone();
                    for r in 0..d.rows() {
                        let gr = g.data()[r];
                        d.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    d
                };
                if self.wants(a) {
                    let d = scale_rows(&self.nodes[b.0].value);
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = scale_rows(&self.nodes[a.0].value);
                    self.accumulate(b, d);
                }
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(a);
                self.accumulate(a, Matrix::filled(rows, cols, g.data()[0]));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(a);
                let v = g.data()[0] / (rows * cols) as f64;
                self.accumulate(a, Matrix::filled(rows, cols, v));
            }
            Op::InnerProduct(a, b) => {
                let gs = g.data()[0];
                if self.wants(a) {
                    let d = self.nodes[b.0].value.map(|x| x * gs);
                    let (rows, cols) = self.shape(a);
                    let d = Matrix::from_vec(rows, cols, d.into_vec()).expect("vector size");
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = self.nodes[a.0].value.map(|x| x * gs);
                    let (rows, cols) = self.shape(b);
                    let d = Matrix::from_vec(rows, cols, d.into_vec()).expect("vector size");
                    self.accumulate(b, d);
                }
            }
            Op::Element(a, k) => {
                let (rows, cols) = self.shape(a);
                let mut d = Matrix::zeros(rows, cols);
                d.data_mut()[k] = g.data()[0];
                self.accumulate(a, d);
            }
            Op::Bce(p, ref labels) => {
                let pv = &self.nodes[p.0].value;
                let n = labels.len() as f64;
                let gs = g.data()[0];
                let data = pv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&p, &y)| {
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                            0.0
                        } else {
                            gs * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                let d = Matrix::from_vec(pv.rows(), pv.cols(), data).expect("bce size");
                self.accumulate(p, d);
            }
        }
    }
}
