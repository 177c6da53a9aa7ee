//! Reverse-mode automatic differentiation on small dense matrices.
//!
//! The backward pass emits ordinary graph nodes instead of raw buffers, so a
//! gradient is itself a differentiable expression. Differentiating an inner
//! SGD update `theta' = theta - alpha * grad(loss)` with respect to `theta`
//! therefore yields the exact second-order meta-gradient, not an
//! approximation.
//!
//! Everything is `f64` and eager: node values are computed at construction.
//! A [`Tape`] owns the node arena; [`Tensor`] handles are cheap clones.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// Dense row-major matrix. Scalars are 1x1, row vectors 1xN, columns Nx1.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn row_vec(v: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: v.len(), data: v }
    }

    pub fn col_vec(v: Vec<f64>) -> Self {
        Matrix { rows: v.len(), cols: 1, data: v }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

type Id = usize;

// Some payload fields (broadcast widths, scalar offsets) are only needed
// at construction time; they stay for Debug output.
#[derive(Debug, Clone)]
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Scale(Id, f64),
    Offset(Id, f64),
    AddRowVec(Id, Id),
    MatMul(Id, Id),
    Transpose(Id),
    SumAll(Id),
    SumRows(Id),
    RowSums(Id),
    RepeatRows(Id, usize),
    RepeatCols(Id, usize),
    BlockSumRows(Id, usize),
    BlockRepeatRows(Id, usize),
    BroadcastScalar(Id, usize, usize),
    Exp(Id),
    Ln(Id),
    Tanh(Id),
    Sqrt(Id),
    Relu(Id),
    GatherRows(Id, Rc<Vec<usize>>),
    ScatterAddRows(Id, Rc<Vec<usize>>, usize),
    GatherPerRow(Id, Rc<Vec<usize>>),
    ScatterPerRow(Id, Rc<Vec<usize>>, usize),
    SliceRows(Id, usize, usize),
    SliceCols(Id, usize, usize),
    PadRows(Id, usize, usize),
    PadCols(Id, usize, usize),
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Arena of computation nodes. Clone is shallow (shared arena).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: Id,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Matrix, needs_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value, needs_grad });
        Tensor { tape: self.clone(), id }
    }

    /// A differentiable leaf (model parameter).
    pub fn param(&self, value: Matrix) -> Tensor {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable leaf (data, masks, detached values).
    pub fn constant(&self, value: Matrix) -> Tensor {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Matrix::scalar(v))
    }

    pub fn concat_rows(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let (cols, needs) = {
            let inner = self.inner.borrow();
            let cols = inner.nodes[parts[0].id].value.cols;
            let mut needs = false;
            for p in parts {
                assert!(Rc::ptr_eq(&p.tape.inner, &self.inner), "cross-tape concat");
                assert_eq!(inner.nodes[p.id].value.cols, cols, "concat_rows: ragged columns");
                needs |= inner.nodes[p.id].needs_grad;
            }
            (cols, needs)
        };
        let mut data = Vec::new();
        let mut rows = 0;
        {
            let inner = self.inner.borrow();
            for p in parts {
                let v = &inner.nodes[p.id].value;
                rows += v.rows;
                data.extend_from_slice(&v.data);
            }
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            Matrix::new(rows, cols, data),
            needs,
        )
    }

    pub fn concat_cols(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let inner = self.inner.borrow();
        let rows = inner.nodes[parts[0].id].value.rows;
        let mut needs = false;
        let mut cols = 0;
        for p in parts {
            assert_eq!(inner.nodes[p.id].value.rows, rows, "concat_cols: ragged rows");
            needs |= inner.nodes[p.id].needs_grad;
            cols += inner.nodes[p.id].value.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let v = &inner.nodes[p.id].value;
                data.extend_from_slice(v.row(r));
            }
        }
        drop(inner);
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            Matrix::new(rows, cols, data),
            needs,
        )
    }

    /// Drops every node with id >= `mark`. Callers must not hold handles to
    /// the dropped range; used by [`grad_values`] to reclaim adjoint nodes.
    fn truncate(&self, mark: usize) {
        self.inner.borrow_mut().nodes.truncate(mark);
    }
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = vec![0.0; a.rows * b.cols];
    // ikj order so the inner loop streams contiguous rows of b and out.
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Matrix::new(a.rows, b.cols, out)
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Ref<'_, Matrix> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id].value)
    }

    pub fn value_clone(&self) -> Matrix {
        self.value().clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert!(v.is_scalar(), "scalar_value on {}x{} tensor", v.rows, v.cols);
        v.data[0]
    }

    pub fn rows(&self) -> usize {
        self.value().rows
    }

    pub fn cols(&self) -> usize {
        self.value().cols
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Re-enters the value as a constant: gradients do not flow through.
    pub fn detach(&self) -> Tensor {
        self.tape.constant(self.value_clone())
    }

    fn unary(&self, op: Op, value: Matrix) -> Tensor {
        let needs = self.needs_grad();
        self.tape.push(op, value, needs)
    }

    fn binary(&self, other: &Tensor, op: Op, value: Matrix) -> Tensor {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "operands live on different tapes"
        );
        let needs = self.needs_grad() || other.needs_grad();
        self.tape.push(op, value, needs)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
            Matrix::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
        };
        self.binary(other, Op::Add(self.id, other.id), v)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
            Matrix::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect())
        };
        self.binary(other, Op::Sub(self.id, other.id), v)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul shape mismatch");
            Matrix::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
        };
        self.binary(other, Op::Mul(self.id, other.id), v)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "div shape mismatch");
            Matrix::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x / y).collect())
        };
        self.binary(other, Op::Div(self.id, other.id), v)
    }

    pub fn neg(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| -x).collect())
        };
        self.unary(Op::Neg(self.id), v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x * c).collect())
        };
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn offset(&self, c: f64) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x + c).collect())
        };
        self.unary(Op::Offset(self.id, c), v)
    }

    /// `(m x n) + (1 x n)` broadcast over rows.
    pub fn add_row_vec(&self, v: &Tensor) -> Tensor {
        let out = {
            let a = self.value();
            let b = v.value();
            assert_eq!(b.rows, 1, "add_row_vec expects a row vector");
            assert_eq!(a.cols, b.cols, "add_row_vec width mismatch");
            let mut data = a.data.clone();
            for r in 0..a.rows {
                for c in 0..a.cols {
                    data[r * a.cols + c] += b.data[c];
                }
            }
            Matrix::new(a.rows, a.cols, data)
        };
        self.binary(v, Op::AddRowVec(self.id, v.id), out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = matmul(&self.value(), &other.value());
        self.binary(other, Op::MatMul(self.id, other.id), v)
    }

    pub fn t(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::from_fn(a.cols, a.rows, |r, c| a.at(c, r))
        };
        self.unary(Op::Transpose(self.id), v)
    }

    pub fn sum_all(&self) -> Tensor {
        let v = Matrix::scalar(self.value().data.iter().sum());
        self.unary(Op::SumAll(self.id), v)
    }

    /// Column sums: `(m x n) -> (1 x n)`.
    pub fn sum_rows(&self) -> Tensor {
        let v = {
            let a = self.value();
            let mut out = vec![0.0; a.cols];
            for r in 0..a.rows {
                for c in 0..a.cols {
                    out[c] += a.at(r, c);
                }
            }
            Matrix::row_vec(out)
        };
        self.unary(Op::SumRows(self.id), v)
    }

    /// Row sums: `(m x n) -> (m x 1)`.
    pub fn row_sums(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::col_vec((0..a.rows).map(|r| a.row(r).iter().sum()).collect())
        };
        self.unary(Op::RowSums(self.id), v)
    }

    pub fn repeat_rows(&self, m: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert_eq!(a.rows, 1, "repeat_rows expects a row vector");
            let mut data = Vec::with_capacity(m * a.cols);
            for _ in 0..m {
                data.extend_from_slice(&a.data);
            }
            Matrix::new(m, a.cols, data)
        };
        self.unary(Op::RepeatRows(self.id, m), v)
    }

    pub fn repeat_cols(&self, n: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert_eq!(a.cols, 1, "repeat_cols expects a column vector");
            Matrix::from_fn(a.rows, n, |r, _| a.data[r])
        };
        self.unary(Op::RepeatCols(self.id, n), v)
    }

    /// Sums consecutive blocks of `k` rows: `(b*k x n) -> (b x n)`.
    pub fn block_sum_rows(&self, k: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert!(k > 0 && a.rows % k == 0, "block_sum_rows: {} rows not divisible by {}", a.rows, k);
            let b = a.rows / k;
            let mut out = Matrix::zeros(b, a.cols);
            for r in 0..a.rows {
                let ob = r / k;
                for c in 0..a.cols {
                    out.data[ob * a.cols + c] += a.at(r, c);
                }
            }
            out
        };
        self.unary(Op::BlockSumRows(self.id, k), v)
    }

    /// Repeats each row `k` times: `(b x n) -> (b*k x n)`.
    pub fn block_repeat_rows(&self, k: usize) -> Tensor {
        let v = {
            let a = self.value();
            let mut data = Vec::with_capacity(a.rows * k * a.cols);
            for r in 0..a.rows {
                for _ in 0..k {
                    data.extend_from_slice(a.row(r));
                }
            }
            Matrix::new(a.rows * k, a.cols, data)
        };
        self.unary(Op::BlockRepeatRows(self.id, k), v)
    }

    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert!(a.is_scalar(), "broadcast_scalar expects a 1x1 tensor");
            Matrix::new(rows, cols, vec![a.data[0]; rows * cols])
        };
        self.unary(Op::BroadcastScalar(self.id, rows, cols), v)
    }

    pub fn exp(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x.exp()).collect())
        };
        self.unary(Op::Exp(self.id), v)
    }

    pub fn ln(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x.ln()).collect())
        };
        self.unary(Op::Ln(self.id), v)
    }

    pub fn tanh(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x.tanh()).collect())
        };
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn sqrt(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x.sqrt()).collect())
        };
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn relu(&self) -> Tensor {
        let v = {
            let a = self.value();
            Matrix::new(a.rows, a.cols, a.data.iter().map(|x| x.max(0.0)).collect())
        };
        self.unary(Op::Relu(self.id), v)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let v = {
            let a = self.value();
            let mut data = Vec::with_capacity(idx.len() * a.cols);
            for &i in idx {
                assert!(i < a.rows, "gather_rows index {} out of {}", i, a.rows);
                data.extend_from_slice(a.row(i));
            }
            Matrix::new(idx.len(), a.cols, data)
        };
        self.unary(Op::GatherRows(self.id, Rc::new(idx.to_vec())), v)
    }

    /// Scatter-add rows of self (len x n) into a (m x n) zero matrix.
    pub fn scatter_add_rows(&self, idx: &[usize], m: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert_eq!(a.rows, idx.len());
            let mut out = Matrix::zeros(m, a.cols);
            for (j, &i) in idx.iter().enumerate() {
                for c in 0..a.cols {
                    out.data[i * a.cols + c] += a.at(j, c);
                }
            }
            out
        };
        self.unary(Op::ScatterAddRows(self.id, Rc::new(idx.to_vec()), m), v)
    }

    /// Picks one entry per row: `(m x n), idx[m] -> (m x 1)`.
    pub fn gather_per_row(&self, idx: &[usize]) -> Tensor {
        let v = {
            let a = self.value();
            assert_eq!(a.rows, idx.len(), "gather_per_row index length");
            Matrix::col_vec(idx.iter().enumerate().map(|(r, &c)| a.at(r, c)).collect())
        };
        self.unary(Op::GatherPerRow(self.id, Rc::new(idx.to_vec())), v)
    }

    /// Spreads a column back into per-row slots: `(m x 1), idx[m] -> (m x n)`.
    pub fn scatter_per_row(&self, idx: &[usize], n: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert_eq!(a.cols, 1);
            assert_eq!(a.rows, idx.len());
            let mut out = Matrix::zeros(a.rows, n);
            for (r, &c) in idx.iter().enumerate() {
                out.data[r * n + c] = a.data[r];
            }
            out
        };
        self.unary(Op::ScatterPerRow(self.id, Rc::new(idx.to_vec()), n), v)
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert!(from <= to && to <= a.rows);
            Matrix::new(to - from, a.cols, a.data[from * a.cols..to * a.cols].to_vec())
        };
        self.unary(Op::SliceRows(self.id, from, to), v)
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert!(from <= to && to <= a.cols);
            let mut data = Vec::with_capacity(a.rows * (to - from));
            for r in 0..a.rows {
                data.extend_from_slice(&a.row(r)[from..to]);
            }
            Matrix::new(a.rows, to - from, data)
        };
        self.unary(Op::SliceCols(self.id, from, to), v)
    }

    /// Embeds into `total` rows of zeros starting at row `offset`.
    pub fn pad_rows(&self, offset: usize, total: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert!(offset + a.rows <= total);
            let mut out = Matrix::zeros(total, a.cols);
            out.data[offset * a.cols..(offset + a.rows) * a.cols].copy_from_slice(&a.data);
            out
        };
        self.unary(Op::PadRows(self.id, offset, total), v)
    }

    /// Embeds into `total` columns of zeros starting at column `offset`.
    pub fn pad_cols(&self, offset: usize, total: usize) -> Tensor {
        let v = {
            let a = self.value();
            assert!(offset + a.cols <= total);
            let mut out = Matrix::zeros(a.rows, total);
            for r in 0..a.rows {
                out.data[r * total + offset..r * total + offset + a.cols].copy_from_slice(a.row(r));
            }
            out
        };
        self.unary(Op::PadCols(self.id, offset, total), v)
    }
}

/// Accumulates `contribution` into the adjoint slot for `id`.
fn accumulate(adjoints: &mut [Option<Tensor>], id: Id, contribution: Tensor) {
    adjoints[id] = Some(match adjoints[id].take() {
        Some(acc) => acc.add(&contribution),
        None => contribution,
    });
}

/// Reverse sweep from scalar `out`, returning one adjoint per `wrt` entry.
///
/// Adjoints are built from tape ops, so the returned tensors can be
/// differentiated again (gradients-of-gradients).
pub fn grad(out: &Tensor, wrt: &[Tensor]) -> Vec<Tensor> {
    let tape = out.tape().clone();
    {
        let v = out.value();
        assert!(v.is_scalar(), "grad root must be scalar, got {}x{}", v.rows, v.cols);
    }
    for w in wrt {
        assert!(Rc::ptr_eq(&w.tape.inner, &tape.inner), "wrt tensor on a different tape");
    }

    let root = out.id;
    let mut adjoints: Vec<Option<Tensor>> = vec![None; root + 1];
    adjoints[root] = Some(tape.constant(Matrix::scalar(1.0)));

    for id in (0..=root).rev() {
        let Some(g) = adjoints[id].take() else { continue };
        // Keep the adjoint available for wrt extraction below.
        adjoints[id] = Some(g.clone());
        let (op, needs) = {
            let inner = tape.inner.borrow();
            (inner.nodes[id].op.clone(), inner.nodes[id].needs_grad)
        };
        if !needs {
            continue;
        }
        let parent_needs = |pid: Id| tape.inner.borrow().nodes[pid].needs_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.clone());
                }
                if parent_needs(b) {
                    accumulate(&mut adjoints, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.clone());
                }
                if parent_needs(b) {
                    accumulate(&mut adjoints, b, g.neg());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (Tensor { tape: tape.clone(), id: a }, Tensor { tape: tape.clone(), id: b });
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.mul(&tb));
                }
                if parent_needs(b) {
                    accumulate(&mut adjoints, b, g.mul(&ta));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (Tensor { tape: tape.clone(), id: a }, Tensor { tape: tape.clone(), id: b });
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.div(&tb));
                }
                if parent_needs(b) {
                    // d(a/b)/db = -a / b^2
                    accumulate(&mut adjoints, b, g.mul(&ta).div(&tb.mul(&tb)).neg());
                }
            }
            Op::Neg(a) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.neg());
                }
            }
            Op::Scale(a, c) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.scale(c));
                }
            }
            Op::Offset(a, _) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.clone());
                }
            }
            Op::AddRowVec(a, v) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.clone());
                }
                if parent_needs(v) {
                    accumulate(&mut adjoints, v, g.sum_rows());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (Tensor { tape: tape.clone(), id: a }, Tensor { tape: tape.clone(), id: b });
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.matmul(&tb.t()));
                }
                if parent_needs(b) {
                    accumulate(&mut adjoints, b, ta.t().matmul(&g));
                }
            }
            Op::Transpose(a) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.t());
                }
            }
            Op::SumAll(a) => {
                if parent_needs(a) {
                    let (r, c) = {
                        let inner = tape.inner.borrow();
                        (inner.nodes[a].value.rows, inner.nodes[a].value.cols)
                    };
                    accumulate(&mut adjoints, a, g.broadcast_scalar(r, c));
                }
            }
            Op::SumRows(a) => {
                if parent_needs(a) {
                    let m = tape.inner.borrow().nodes[a].value.rows;
                    accumulate(&mut adjoints, a, g.repeat_rows(m));
                }
            }
            Op::RowSums(a) => {
                if parent_needs(a) {
                    let n = tape.inner.borrow().nodes[a].value.cols;
                    accumulate(&mut adjoints, a, g.repeat_cols(n));
                }
            }
            Op::RepeatRows(a, _) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.sum_rows());
                }
            }
            Op::RepeatCols(a, _) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.row_sums());
                }
            }
            Op::BlockSumRows(a, k) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.block_repeat_rows(k));
                }
            }
            Op::BlockRepeatRows(a, k) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.block_sum_rows(k));
                }
            }
            Op::BroadcastScalar(a, _, _) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.sum_all());
                }
            }
            Op::Exp(a) => {
                if parent_needs(a) {
                    let out_t = Tensor { tape: tape.clone(), id };
                    accumulate(&mut adjoints, a, g.mul(&out_t));
                }
            }
            Op::Ln(a) => {
                if parent_needs(a) {
                    let ta = Tensor { tape: tape.clone(), id: a };
                    accumulate(&mut adjoints, a, g.div(&ta));
                }
            }
            Op::Tanh(a) => {
                if parent_needs(a) {
                    let out_t = Tensor { tape: tape.clone(), id };
                    // 1 - tanh^2
                    let sech2 = out_t.mul(&out_t).neg().offset(1.0);
                    accumulate(&mut adjoints, a, g.mul(&sech2));
                }
            }
            Op::Sqrt(a) => {
                if parent_needs(a) {
                    let out_t = Tensor { tape: tape.clone(), id };
                    accumulate(&mut adjoints, a, g.scale(0.5).div(&out_t));
                }
            }
            Op::Relu(a) => {
                if parent_needs(a) {
                    // Indicator of the active set, detached: exact a.e.
                    let mask = {
                        let inner = tape.inner.borrow();
                        let av = &inner.nodes[a].value;
                        Matrix::new(
                            av.rows,
                            av.cols,
                            av.data.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
                        )
                    };
                    let mask_t = tape.constant(mask);
                    accumulate(&mut adjoints, a, g.mul(&mask_t));
                }
            }
            Op::GatherRows(a, idx) => {
                if parent_needs(a) {
                    let m = tape.inner.borrow().nodes[a].value.rows;
                    accumulate(&mut adjoints, a, g.scatter_add_rows(&idx, m));
                }
            }
            Op::ScatterAddRows(a, idx, _) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.gather_rows(&idx));
                }
            }
            Op::GatherPerRow(a, idx) => {
                if parent_needs(a) {
                    let n = tape.inner.borrow().nodes[a].value.cols;
                    accumulate(&mut adjoints, a, g.scatter_per_row(&idx, n));
                }
            }
            Op::ScatterPerRow(a, idx, _) => {
                if parent_needs(a) {
                    accumulate(&mut adjoints, a, g.gather_per_row(&idx));
                }
            }
            Op::SliceRows(a, from, _to) => {
                if parent_needs(a) {
                    let m = tape.inner.borrow().nodes[a].value.rows;
                    accumulate(&mut adjoints, a, g.pad_rows(from, m));
                }
            }
            Op::SliceCols(a, from, _to) => {
                if parent_needs(a) {
                    let n = tape.inner.borrow().nodes[a].value.cols;
                    accumulate(&mut adjoints, a, g.pad_cols(from, n));
                }
            }
            Op::PadRows(a, offset, _total) => {
                if parent_needs(a) {
                    let m = tape.inner.borrow().nodes[a].value.rows;
                    accumulate(&mut adjoints, a, g.slice_rows(offset, offset + m));
                }
            }
            Op::PadCols(a, offset, _total) => {
                if parent_needs(a) {
                    let n = tape.inner.borrow().nodes[a].value.cols;
                    accumulate(&mut adjoints, a, g.slice_cols(offset, offset + n));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = tape.inner.borrow().nodes[p].value.rows;
                    if parent_needs(p) {
                        accumulate(&mut adjoints, p, g.slice_rows(start, start + rows));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = tape.inner.borrow().nodes[p].value.cols;
                    if parent_needs(p) {
                        accumulate(&mut adjoints, p, g.slice_cols(start, start + cols));
                    }
                    start += cols;
                }
            }
        }
    }

    wrt.iter()
        .map(|w| match adjoints.get(w.id).and_then(|a| a.clone()) {
            Some(t) => t,
            None => {
                let (r, c) = {
                    let inner = tape.inner.borrow();
                    (inner.nodes[w.id].value.rows, inner.nodes[w.id].value.cols)
                };
                tape.constant(Matrix::zeros(r, c))
            }
        })
        .collect()
}

/// Like [`grad`], but returns plain matrices and reclaims every node the
/// sweep created. Use when the gradient itself does not need gradients.
pub fn grad_values(out: &Tensor, wrt: &[Tensor]) -> Vec<Matrix> {
    let tape = out.tape().clone();
    let mark = tape.len();
    let gs = grad(out, wrt);
    let values: Vec<Matrix> = gs.iter().map(|g| g.value_clone()).collect();
    drop(gs);
    tape.truncate(mark);
    values
}

/// Row-wise log-softmax with a detached max shift.
///
/// Entries at -1e9 or below (additive masks) come out with probability
/// exactly zero: `exp` underflows before the shift can matter.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let maxes = {
        let v = x.value();
        Matrix::col_vec(
            (0..v.rows)
                .map(|r| v.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        )
    };
    let n = x.cols();
    let shift = x.tape().constant(maxes).repeat_cols(n);
    let shifted = x.sub(&shift);
    let lse = shifted.exp().row_sums().ln();
    shifted.sub(&lse.repeat_cols(n))
}

/// Row-wise softmax probabilities (same shifting as [`log_softmax_rows`]).
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let maxes = {
        let v = x.value();
        Matrix::col_vec(
            (0..v.rows)
                .map(|r| v.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        )
    };
    let n = x.cols();
    let shift = x.tape().constant(maxes).repeat_cols(n);
    let e = x.sub(&shift).exp();
    e.div(&e.row_sums().repeat_cols(n))
}
