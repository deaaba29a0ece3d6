//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation pushes a node
//! holding its forward value and the [`Var`]s it read, so inputs always precede
//! outputs and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use kernel_attention::autodiff::Tape;
//! use kernel_attention::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::row_vector(&[1.0, -2.0, 3.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Each node also adds its multiply-accumulate count to an [`OpCounter`] under
//! the tape's current [`Phase`]; the complexity checks read those tallies.
//!
//! Shape mismatches inside a tape are programming errors and panic. Public
//! entry points that build tapes validate their inputs first.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of an attention computation an operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// Query/key projections.
    Projection,
    /// Per-token work feeding the score matrix: feature maps, norms.
    Features,
    /// Work over the full score matrix.
    Pairwise,
    /// Row normalization of the score matrix.
    Normalization,
    /// Spectral point generation (inference and generator networks).
    Sampler,
    /// Copula coupling across heads.
    Copula,
    /// Everything else: values, task head, losses.
    Other,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Projection,
        Phase::Features,
        Phase::Pairwise,
        Phase::Normalization,
        Phase::Sampler,
        Phase::Copula,
        Phase::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Projection => "projection",
            Phase::Features => "features",
            Phase::Pairwise => "pairwise",
            Phase::Normalization => "normalization",
            Phase::Sampler => "sampler",
            Phase::Copula => "copula",
            Phase::Other => "other",
        }
    }
}

/// Multiply-accumulate tally per [`Phase`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    counts: BTreeMap<Phase, u64>,
}

impl OpCounter {
    pub fn add(&mut self, phase: Phase, n: u64) {
        *self.counts.entry(phase).or_default() += n;
    }

    pub fn get(&self, phase: Phase) -> u64 {
        self.counts.get(&phase).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn total_of(&self, phases: &[Phase]) -> u64 {
        phases.iter().map(|&p| self.get(p)).sum()
    }

    pub fn merge(&mut self, other: &OpCounter) {
        for (&p, &n) in &other.counts {
            self.add(p, n);
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Cos(Var),
    Sin(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    RowSum(Var),
    ColSum(Var),
    Sum(Var),
    RowSoftmax(Var),
    RowNormalize(Var),
    GatherRows(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
    OuterSum(Var, Var),
    RowPNormSq(Var, f64),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Select(Matrix, Var, Var),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Diag(Var),
    CorrCholesky(Var),
    PeriodicLogSim(Var, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::Sum(..) => "sum",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::GatherRows(..) => "gather_rows",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::OuterSum(..) => "outer_sum",
            Op::RowPNormSq(..) => "row_p_norm_sq",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Select(..) => "select",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Diag(..) => "diag",
            Op::CorrCholesky(..) => "corr_cholesky",
            Op::PeriodicLogSim(..) => "periodic_log_sim",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only record of a computation.
pub struct Tape {
    nodes: Vec<Node>,
    counter: OpCounter,
    phase: Phase,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("phase", &self.phase)
            .finish()
    }
}

fn assert_same_shape(op: &str, a: &Matrix, b: &Matrix) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: OpCounter::default(),
            phase: Phase::Other,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the phase future operations are counted under; returns the old one.
    pub fn set_phase(&mut self, phase: Phase) -> Phase {
        std::mem::replace(&mut self.phase, phase)
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar(): node is {:?}", m.shape());
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, macs: u64) -> Var {
        self.counter.add(self.phase, macs);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let n = v.data().len() as u64;
        self.push(v, op, n)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, 0)
    }

    /// An input treated as constant. Its gradient is still recorded.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let macs = (va.rows() * va.cols() * vb.cols()) as u64;
        let v = matmul(va, vb).unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::MatMul(a, b), macs)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let macs = (va.rows() * va.cols() * vb.rows()) as u64;
        let v = matmul_nt(va, vb).unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::MatMulNT(a, b), macs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), 0)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape(name, va, vb);
        let v = va.zip_with(vb, "binary", f).expect("shapes checked");
        let n = v.data().len() as u64;
        self.push(v, op, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    fn broadcast(
        &mut self,
        a: Var,
        v: Var,
        by_row: bool,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        let (va, vv) = (self.value(a), self.value(v));
        if by_row {
            assert_eq!(vv.shape(), (1, va.cols()), "{}: bad row vector", op.name());
        } else {
            assert_eq!(
                vv.shape(),
                (va.rows(), 1),
                "{}: bad column vector",
                op.name()
            );
        }
        let out = Matrix::from_fn(va.rows(), va.cols(), |i, j| {
            let b = if by_row { vv[(0, j)] } else { vv[(i, 0)] };
            f(va[(i, j)], b)
        });
        let n = out.data().len() as u64;
        self.push(out, op, n)
    }

    /// Adds a `1 x n` row vector to every row.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        self.broadcast(a, v, true, |x, y| x + y, Op::AddRow(a, v))
    }

    /// Adds an `m x 1` column vector to every column.
    pub fn add_col(&mut self, a: Var, v: Var) -> Var {
        self.broadcast(a, v, false, |x, y| x + y, Op::AddCol(a, v))
    }

    /// Scales column `j` by `v[j]`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        self.broadcast(a, v, true, |x, y| x * y, Op::MulRow(a, v))
    }

    /// Scales row `i` by `v[i]`.
    pub fn mul_col(&mut self, a: Var, v: Var) -> Var {
        self.broadcast(a, v, false, |x, y| x * y, Op::MulCol(a, v))
    }

    /// Divides row `i` by `v[i]`.
    pub fn div_col(&mut self, a: Var, v: Var) -> Var {
        self.broadcast(a, v, false, |x, y| x / y, Op::DivCol(a, v))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().sum());
        let n = va.data().len() as u64;
        self.push(v, Op::RowSum(a), n)
    }

    /// `m x n -> 1 x n`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = Matrix::zeros(1, va.cols());
        for i in 0..va.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let n = va.data().len() as u64;
        self.push(v, Op::ColSum(a), n)
    }

    /// Mean over rows, `m x n -> 1 x n`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let m = self.value(a).rows() as f64;
        let s = self.col_sum(a);
        self.scale(s, 1.0 / m)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::filled(1, 1, va.sum());
        let n = va.data().len() as u64;
        self.push(v, Op::Sum(a), n)
    }

    /// Row-wise softmax with max-subtraction. `allowed` is a 0/1 matrix; zero
    /// entries get exactly zero weight. Panics if a row has no allowed entry.
    pub fn row_softmax(&mut self, a: Var, allowed: Option<Matrix>) -> Var {
        let va = self.value(a);
        if let Some(m) = &allowed {
            assert_same_shape("row_softmax mask", va, m);
        }
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let keep = |j: usize| allowed.as_ref().is_none_or(|m| m[(i, j)] != 0.0);
            let mx = (0..va.cols())
                .filter(|&j| keep(j))
                .map(|j| va[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx > f64::NEG_INFINITY, "row_softmax: row {i} fully masked");
            let mut s = 0.0;
            for j in 0..va.cols() {
                if keep(j) {
                    let e = (va[(i, j)] - mx).exp();
                    out[(i, j)] = e;
                    s += e;
                }
            }
            for x in out.row_mut(i) {
                *x /= s;
            }
        }
        let n = va.data().len() as u64;
        self.push(out, Op::RowSoftmax(a), n)
    }

    /// `x_ij / sum_l x_il`.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..va.rows() {
            let s: f64 = va.row(i).iter().sum();
            for x in out.row_mut(i) {
                *x /= s;
            }
        }
        let n = va.data().len() as u64;
        self.push(out, Op::RowNormalize(a), n)
    }

    /// Rows `idx[r]` of `table`, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &r in idx {
            assert!(
                r < t.rows(),
                "gather_rows: index {r} out of {} rows",
                t.rows()
            );
            data.extend_from_slice(t.row(r));
        }
        let v = Matrix::new(idx.len(), t.cols(), data).expect("sized");
        self.push(v, Op::GatherRows(table, idx.to_vec()), 0)
    }

    /// `D_ij = |a_i - b_j|^2` for rows `a_i`, `b_j`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "pairwise_sq_dist: width mismatch");
        let v = Matrix::from_fn(va.rows(), vb.rows(), |i, j| {
            crate::numerics::sq_dist(va.row(i), vb.row(j))
        });
        let macs = (va.rows() * vb.rows() * va.cols()) as u64;
        self.push(v, Op::PairwiseSqDist(a, b), macs)
    }

    /// `S_ij = u_i + v_j` for column vectors `u` (m x 1) and `v` (n x 1).
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Var {
        let (vu, vv) = (self.value(u), self.value(v));
        assert_eq!(vu.cols(), 1, "outer_sum: u must be a column");
        assert_eq!(vv.cols(), 1, "outer_sum: v must be a column");
        let out = Matrix::from_fn(vu.rows(), vv.rows(), |i, j| vu[(i, 0)] + vv[(j, 0)]);
        let n = out.data().len() as u64;
        self.push(out, Op::OuterSum(u, v), n)
    }

    /// Squared L^p norm of each row, `m x n -> m x 1`.
    pub fn row_p_norm_sq(&mut self, a: Var, p: f64) -> Var {
        assert!(p > 0.0, "row_p_norm_sq: p must be positive");
        let va = self.value(a);
        let v = Matrix::from_fn(va.rows(), 1, |i, _| {
            crate::decomposition::p_norm_sq(va.row(i), p).expect("p checked")
        });
        let n = va.data().len() as u64;
        self.push(v, Op::RowPNormSq(a, p), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let v = Matrix::from_fn(va.rows(), len, |i, j| va[(i, start + j)]);
        self.push(v, Op::SliceCols(a, start), 0)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let v = va.slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), 0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols: row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), 0)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out = out
                .vstack(self.value(p))
                .unwrap_or_else(|e| panic!("concat_rows: {e}"));
        }
        self.push(out, Op::ConcatRows(parts.to_vec()), 0)
    }

    /// Picks `a` where `mask` is non-zero, `b` elsewhere.
    pub fn select(&mut self, mask: Matrix, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("select", va, vb);
        assert_same_shape("select mask", va, &mask);
        let v = Matrix::from_fn(va.rows(), va.cols(), |i, j| {
            if mask[(i, j)] != 0.0 {
                va[(i, j)]
            } else {
                vb[(i, j)]
            }
        });
        self.push(v, Op::Select(mask, a, b), 0)
    }

    /// Weighted mean over rows of `-log softmax(logits_r)[labels_r]`, `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), labels.len(), "cross_entropy: label count");
        let w: Vec<f64> = weights.map_or_else(|| vec![1.0; labels.len()], <[f64]>::to_vec);
        assert_eq!(w.len(), labels.len(), "cross_entropy: weight count");
        let total_w: f64 = w.iter().sum();
        assert!(total_w > 0.0, "cross_entropy: zero total weight");
        let mut loss = 0.0;
        for (r, (&y, &wr)) in labels.iter().zip(&w).enumerate() {
            if wr == 0.0 {
                continue;
            }
            let lse = crate::numerics::log_sum_exp(vl.row(r));
            loss += wr * (lse - vl[(r, y)]);
        }
        let n = vl.data().len() as u64;
        self.push(
            Matrix::filled(1, 1, loss / total_w),
            Op::CrossEntropy(logits, labels.to_vec(), w),
            n,
        )
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), va.cols(), "diag: not square");
        let v = Matrix::from_fn(va.rows(), 1, |i, _| va[(i, i)]);
        self.push(v, Op::Diag(a), 0)
    }

    /// Cholesky factor of a correlation matrix from unconstrained parameters.
    ///
    /// Strictly-lower entries are taken as-is, the diagonal is exponentiated,
    /// the upper triangle is ignored, and each row is scaled to unit norm. The
    /// result `L` has a positive diagonal and `L L^T` has unit diagonal.
    pub fn corr_cholesky(&mut self, raw: Var) -> Var {
        let vr = self.value(raw);
        let v = corr_cholesky_value(vr);
        let m = vr.rows() as u64;
        self.push(v, Op::CorrCholesky(raw), m * m)
    }

    /// `-2 sin^2(pi sqrt(d) / period) / ell^2` applied to squared distances.
    pub fn periodic_log_sim(&mut self, sq_dist: Var, period: f64, ell: f64) -> Var {
        let v = self.value(sq_dist).map(|d| {
            let s = (std::f64::consts::PI * d.max(0.0).sqrt() / period).sin();
            -2.0 * s * s / (ell * ell)
        });
        let n = v.data().len() as u64;
        self.push(v, Op::PeriodicLogSim(sq_dist, period, ell), n)
    }

    /// Column vector of each row's maximum, recorded as a constant.
    pub fn row_max_const(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::from_fn(va.rows(), 1, |i, _| {
            va.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        self.constant(v)
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::InvalidParameter(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss node #{}", loss.0),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient at node #{idx} ({})", self.nodes[idx].op.name()),
                });
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Matrix| {
            debug_assert_eq!(d.shape(), self.nodes[v.0].value.shape(), "grad shape");
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let ew = |a: &Matrix, f: &dyn Fn(f64, f64) -> f64| -> Matrix {
            a.zip_with(g, "grad", f).expect("grad shape")
        };

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, val(*b)).expect("shape"));
                acc(*b, matmul(&val(*a).transpose(), g).expect("shape"));
            }
            Op::MatMulNT(a, b) => {
                acc(*a, matmul(g, val(*b)).expect("shape"));
                acc(*b, matmul(&g.transpose(), val(*a)).expect("shape"));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, ew(val(*b), &|bv, gv| bv * gv));
                acc(*b, ew(val(*a), &|av, gv| av * gv));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, ew(vb, &|bv, gv| gv / bv));
                let ga = val(*a)
                    .zip_with(vb, "div", |av, bv| -av / (bv * bv))
                    .expect("shape");
                acc(*b, ew(&ga, &|d, gv| d * gv));
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, v) => {
                acc(*a, g.clone());
                acc(*v, col_sums(g));
            }
            Op::AddCol(a, v) => {
                acc(*a, g.clone());
                acc(*v, row_sums(g));
            }
            Op::MulRow(a, v) => {
                let (va, vv) = (val(*a), val(*v));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * vv[(0, j)]),
                );
                let prod = ew(va, &|x, gv| x * gv);
                acc(*v, col_sums(&prod));
            }
            Op::MulCol(a, v) => {
                let (va, vv) = (val(*a), val(*v));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * vv[(i, 0)]),
                );
                let prod = ew(va, &|x, gv| x * gv);
                acc(*v, row_sums(&prod));
            }
            Op::DivCol(a, v) => {
                let (va, vv) = (val(*a), val(*v));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] / vv[(i, 0)]),
                );
                let d = Matrix::from_fn(vv.rows(), 1, |i, _| {
                    let s: f64 = (0..va.cols()).map(|j| g[(i, j)] * va[(i, j)]).sum();
                    -s / (vv[(i, 0)] * vv[(i, 0)])
                });
                acc(*v, d);
            }
            Op::Exp(a) => acc(*a, ew(y, &|yv, gv| yv * gv)),
            Op::Log(a) => acc(*a, ew(val(*a), &|x, gv| gv / x)),
            Op::Tanh(a) => acc(*a, ew(y, &|yv, gv| (1.0 - yv * yv) * gv)),
            Op::Cos(a) => acc(*a, ew(val(*a), &|x, gv| -x.sin() * gv)),
            Op::Sin(a) => acc(*a, ew(val(*a), &|x, gv| x.cos() * gv)),
            Op::Square(a) => acc(*a, ew(val(*a), &|x, gv| 2.0 * x * gv)),
            Op::Sqrt(a) => acc(*a, ew(y, &|yv, gv| gv / (2.0 * yv))),
            Op::Abs(a) => acc(*a, ew(val(*a), &|x, gv| sign(x) * gv)),
            Op::Relu(a) => acc(*a, ew(val(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 })),
            Op::RowSum(a) => {
                let va = val(*a);
                acc(*a, Matrix::from_fn(va.rows(), va.cols(), |i, _| g[(i, 0)]));
            }
            Op::ColSum(a) => {
                let va = val(*a);
                acc(*a, Matrix::from_fn(va.rows(), va.cols(), |_, j| g[(0, j)]));
            }
            Op::Sum(a) => {
                let va = val(*a);
                acc(*a, Matrix::filled(va.rows(), va.cols(), g[(0, 0)]));
            }
            Op::RowSoftmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dotp: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - dotp);
                    }
                }
                acc(*a, d);
            }
            Op::RowNormalize(a) => {
                let va = val(*a);
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s: f64 = va.row(i).iter().sum();
                    let dotp: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        d[(i, j)] = (g[(i, j)] - dotp) / s;
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(t, idx_list) => {
                let vt = val(*t);
                let mut d = Matrix::zeros(vt.rows(), vt.cols());
                for (r, &src) in idx_list.iter().enumerate() {
                    for (o, x) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*t, d);
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let gij = 2.0 * g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..va.cols() {
                            let diff = gij * (va[(i, c)] - vb[(j, c)]);
                            da[(i, c)] += diff;
                            db[(j, c)] -= diff;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::OuterSum(u, v) => {
                acc(*u, row_sums(g));
                acc(*v, col_sums(g).transpose());
            }
            Op::RowPNormSq(a, p) => {
                let va = val(*a);
                let p = *p;
                let d = Matrix::from_fn(va.rows(), va.cols(), |i, j| {
                    let x = va[(i, j)];
                    let gi = g[(i, 0)];
                    if p == 2.0 {
                        return 2.0 * x * gi;
                    }
                    if x == 0.0 {
                        return 0.0;
                    }
                    // d|x|_p^2 / dx_j = 2 |x|_p^(2-p) |x_j|^(p-1) sign(x_j)
                    let n = y[(i, 0)].sqrt();
                    2.0 * n.powf(2.0 - p) * x.abs().powf(p - 1.0) * sign(x) * gi
                });
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let va = val(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let va = val(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, Matrix::from_fn(g.rows(), w, |i, j| g[(i, off + j)]));
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    acc(p, g.slice_rows(off, h));
                    off += h;
                }
            }
            Op::Select(mask, a, b) => {
                acc(*a, ew(mask, &|m, gv| if m != 0.0 { gv } else { 0.0 }));
                acc(*b, ew(mask, &|m, gv| if m != 0.0 { 0.0 } else { gv }));
            }
            Op::CrossEntropy(logits, labels, w) => {
                let vl = val(*logits);
                let total_w: f64 = w.iter().sum();
                let g0 = g[(0, 0)];
                let mut d = Matrix::zeros(vl.rows(), vl.cols());
                for (r, (&lab, &wr)) in labels.iter().zip(w).enumerate() {
                    if wr == 0.0 {
                        continue;
                    }
                    let lse = crate::numerics::log_sum_exp(vl.row(r));
                    for c in 0..vl.cols() {
                        let p = (vl[(r, c)] - lse).exp();
                        let t = if c == lab { 1.0 } else { 0.0 };
                        d[(r, c)] = g0 * wr * (p - t) / total_w;
                    }
                }
                acc(*logits, d);
            }
            Op::Diag(a) => {
                let n = g.rows();
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    d[(i, i)] = g[(i, 0)];
                }
                acc(*a, d);
            }
            Op::CorrCholesky(raw) => {
                let vr = val(*raw);
                let n = vr.rows();
                let lraw = lower_raw(vr);
                let mut d = Matrix::zeros(n, n);
                for i in 0..n {
                    let norm = lraw.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gl: f64 = (0..n).map(|j| g[(i, j)] * y[(i, j)]).sum();
                    for j in 0..=i {
                        let g_raw = (g[(i, j)] - gl * y[(i, j)]) / norm;
                        d[(i, j)] = if i == j { g_raw * lraw[(i, i)] } else { g_raw };
                    }
                }
                acc(*raw, d);
            }
            Op::PeriodicLogSim(a, period, ell) => {
                let va = val(*a);
                let (period, ell) = (*period, *ell);
                let pi = std::f64::consts::PI;
                acc(
                    *a,
                    ew(va, &|dsq, gv| {
                        let r = dsq.max(0.0).sqrt();
                        let k = 2.0 * pi / period;
                        // sin(k r) / r with its limit at r = 0
                        let sinc = if r < 1e-8 { k } else { (k * r).sin() / r };
                        -(pi / (ell * ell * period)) * sinc * gv
                    }),
                );
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_sums(g: &Matrix) -> Matrix {
    Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum())
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut v = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, x) in v.data_mut().iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    v
}

fn lower_raw(raw: &Matrix) -> Matrix {
    Matrix::from_fn(raw.rows(), raw.cols(), |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[(i, j)],
        std::cmp::Ordering::Equal => raw[(i, i)].exp(),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Forward map of [`Tape::corr_cholesky`].
pub fn corr_cholesky_value(raw: &Matrix) -> Matrix {
    let mut l = lower_raw(raw);
    for i in 0..l.rows() {
        let n = l.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in l.row_mut(i) {
            *x /= n;
        }
    }
    l
}

/// Gradients from one reverse sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient with respect to `v`, or zeros shaped like `like` when the
    /// loss does not depend on it.
    pub fn wrt_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    /// The gradient with respect to `v`. Panics when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> &Matrix {
        self.get(v)
            .expect("variable does not contribute to the loss")
    }
}

/// Handle to a matrix in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
///
/// Insertion order is the canonical order for binding onto a tape, for
/// optimizer state and for checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Tape variables for every entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

const CHECKPOINT_HEADER: &str = "kernel-attention-params v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "parameter names must be non-empty without whitespace: {name:?}"
        );
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Pushes every parameter onto `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|m| tape.leaf(m.clone())).collect())
    }

    /// Gradients for every parameter, zeros where the loss does not depend on it.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(m, &v)| grads.wrt_or_zeros(v, m))
            .collect()
    }

    /// Text checkpoint.
    ///
    /// ```text
    /// kernel-attention-params v1
    /// <count>
    /// <name> <rows> <cols>     (once per parameter, in store order)
    /// <row-major values>
    /// ```
    ///
    /// Values are written in shortest round-trip form, so reading a checkpoint
    /// back gives bitwise-identical parameters.
    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_HEADER}\n{}\n", self.values.len());
        for (name, m) in self.names.iter().zip(&self.values) {
            out.push_str(&format!("{name} {} {}\n", m.rows(), m.cols()));
            let vals: Vec<String> = m.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad("missing or unsupported header".into()));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("bad parameter count".into()))?;
        let mut store = ParamStore::new();
        for k in 0..count {
            let head = lines
                .next()
                .ok_or_else(|| bad(format!("truncated before parameter {k}")))?;
            let fields: Vec<&str> = head.split_whitespace().collect();
            let [name, rows, cols] = fields[..] else {
                return Err(bad(format!("bad descriptor line {head:?}")));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| bad(format!("bad rows in {head:?}")))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| bad(format!("bad cols in {head:?}")))?;
            let body = lines
                .next()
                .ok_or_else(|| bad(format!("missing values for {name}")))?;
            let data = body
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| bad(format!("bad value {t:?} in {name}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if store.id(name).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            let m = Matrix::new(rows, cols, data).map_err(|e| bad(format!("{name}: {e}")))?;
            store.add(name, m);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing data".into()));
        }
        Ok(store)
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint("parameter shapes differ".into()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}
