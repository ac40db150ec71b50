//! Reverse-mode tape over dense matrices.
//!
//! Every primitive records its primal value and parent ids. `Tape::gradient`
//! runs the adjoint sweep by appending new nodes to the same tape, so the
//! returned gradients are ordinary variables and can be differentiated again.

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use super::fft;
use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    /// `a * s` with `s` a `1 x 1` variable.
    MulScalar(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    /// `op(a) op(b)`; the flags transpose each operand.
    Matmul(usize, usize, bool, bool),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Silu(usize),
    SiluGrad(usize),
    SiluGrad2(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(Vec<usize>),
    Rfft(usize),
    RfftAdj(usize),
    Irfft(usize),
    IrfftAdj(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) | Matmul(a, b, _, _) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddConst(a) | Sin(a) | Cos(a) | Exp(a) | Tanh(a)
            | Sigmoid(a) | Softplus(a) | Silu(a) | SiluGrad(a) | SiluGrad2(a) | Sum(a)
            | SumRows(a) | SumCols(a) | BroadcastRows(a) | BroadcastCols(a)
            | BroadcastScalar(a) | Reshape(a) | SliceCols(a, _) | PadCols(a, _) | Rfft(a)
            | RfftAdj(a) | Irfft(a) | IrfftAdj(a) => vec![*a],
            ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    value: Rc<Mat>,
    op: Op,
}

/// Append-only computation graph. One tape per thread; not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_bad: Cell<Option<usize>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_grad2(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

fn broadcast_rows(a: &Mat, rows: usize) -> Mat {
    let mut data = Vec::with_capacity(rows * a.cols);
    for _ in 0..rows {
        data.extend_from_slice(&a.data);
    }
    Mat::new(rows, a.cols, data)
}

fn broadcast_cols(a: &Mat, cols: usize) -> Mat {
    let mut data = Vec::with_capacity(a.rows * cols);
    for &v in &a.data {
        data.extend(std::iter::repeat(v).take(cols));
    }
    Mat::new(a.rows, cols, data)
}

fn sum_rows(a: &Mat) -> Mat {
    let mut out = vec![0.0; a.cols];
    for r in 0..a.rows {
        for (o, v) in out.iter_mut().zip(a.row_slice(r)) {
            *o += v;
        }
    }
    Mat::row(out)
}

fn sum_cols(a: &Mat) -> Mat {
    Mat::col((0..a.rows).map(|r| a.row_slice(r).iter().sum()).collect())
}

fn slice_cols(a: &Mat, start: usize, len: usize) -> Mat {
    assert!(start + len <= a.cols, "slice_cols out of range");
    let mut data = Vec::with_capacity(a.rows * len);
    for r in 0..a.rows {
        data.extend_from_slice(&a.row_slice(r)[start..start + len]);
    }
    Mat::new(a.rows, len, data)
}

fn pad_cols(a: &Mat, start: usize, total: usize) -> Mat {
    assert!(start + a.cols <= total, "pad_cols out of range");
    let mut out = Mat::zeros(a.rows, total);
    for r in 0..a.rows {
        out.data[r * total + start..r * total + start + a.cols].copy_from_slice(a.row_slice(r));
    }
    out
}

fn row_op(a: &Mat, row: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert!(row.rows == 1 && row.cols == a.cols, "row operand shape mismatch");
    let mut out = a.clone();
    for r in 0..a.rows {
        for (o, &b) in out.data[r * a.cols..(r + 1) * a.cols].iter_mut().zip(&row.data) {
            *o = f(*o, b);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_bad.get().is_none() && !value.all_finite() {
            self.first_bad.set(Some(id));
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var { tape: self, id }
    }

    /// Input or parameter.
    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.var(Mat::scalar(v))
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        self.nodes.borrow()[id].value.clone()
    }

    fn at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// First node with a non-finite value, if any.
    pub fn check(&self) -> Result<()> {
        match self.first_bad.get() {
            Some(node) => Err(Error::NumericOverflow { node }),
            None => Ok(()),
        }
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows;
        assert!(vals.iter().all(|v| v.rows == rows), "concat_cols row mismatch");
        let cols: usize = vals.iter().map(|v| v.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        self.push(
            Mat::new(rows, cols, data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Gradients of the `1 x 1` variable `out` with respect to `wrt`.
    ///
    /// The result is recorded on the tape (create-graph semantics). Variables
    /// that `out` does not depend on get a zero gradient.
    pub fn gradient<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "gradient needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let zeros = |vs: &[Var<'t>]| -> Vec<Var<'t>> {
            vs.iter()
                .map(|v| {
                    let (r, c) = v.shape();
                    self.var(Mat::zeros(r, c))
                })
                .collect()
        };
        let Some(lo) = wrt.iter().map(|v| v.id).min() else {
            return Ok(vec![]);
        };
        if lo > out.id {
            return Ok(zeros(wrt));
        }
        let hi = out.id;
        let span = hi - lo + 1;
        let mut relevant = vec![false; span];
        for v in wrt {
            if v.id <= hi {
                relevant[v.id - lo] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lo..=hi {
                if !relevant[i - lo] {
                    relevant[i - lo] = nodes[i]
                        .op
                        .parents()
                        .iter()
                        .any(|&p| p >= lo && relevant[p - lo]);
                }
            }
        }
        if !relevant[span - 1] {
            return Ok(zeros(wrt));
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; span];
        grads[span - 1] = Some(self.scalar(1.0));
        for i in (lo..=hi).rev() {
            let Some(g) = grads[i - lo] else { continue };
            if !relevant[i - lo] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let need = |p: usize| p >= lo && relevant[p - lo];
            for (p, gp) in self.vjp(i, &op, g, &need) {
                let slot = &mut grads[p - lo];
                *slot = Some(match *slot {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }
        let result = wrt
            .iter()
            .map(|v| match grads.get(v.id.wrapping_sub(lo)).copied().flatten() {
                Some(g) if v.id <= hi => g,
                _ => {
                    let (r, c) = v.shape();
                    self.var(Mat::zeros(r, c))
                }
            })
            .collect();
        self.check()?;
        Ok(result)
    }

    /// Vector-Jacobian products of node `i` for the parents selected by `need`.
    fn vjp<'t>(
        &'t self,
        i: usize,
        op: &Op,
        g: Var<'t>,
        need: &dyn Fn(usize) -> bool,
    ) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let me = self.at(i);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'t>| {
            if need(p) {
                out.push((p, f()));
            }
        };
        match *op {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| -g);
            }
            Mul(a, b) => {
                emit(a, &|| g * self.at(b));
                emit(b, &|| g * self.at(a));
            }
            Neg(a) => emit(a, &|| -g),
            Scale(a, c) => emit(a, &|| g.scale(c)),
            AddConst(a) => emit(a, &|| g),
            MulScalar(a, s) => {
                emit(a, &|| g.mul_scalar(self.at(s)));
                emit(s, &|| (g * self.at(a)).sum());
            }
            AddRow(a, r) => {
                emit(a, &|| g);
                emit(r, &|| g.sum_rows());
            }
            MulRow(a, r) => {
                emit(a, &|| g.mul_row(self.at(r)));
                emit(r, &|| (g * self.at(a)).sum_rows());
            }
            MulCol(a, c) => {
                emit(a, &|| g.mul_col(self.at(c)));
                emit(c, &|| (g * self.at(a)).sum_cols());
            }
            Matmul(a, b, ta, tb) => {
                let (va, vb) = (self.at(a), self.at(b));
                emit(a, &|| {
                    if ta {
                        vb.gemm(tb, g, true)
                    } else {
                        g.gemm(false, vb, !tb)
                    }
                });
                emit(b, &|| {
                    if tb {
                        g.gemm(true, va, ta)
                    } else {
                        va.gemm(!ta, g, false)
                    }
                });
            }
            Sin(a) => emit(a, &|| g * self.at(a).cos()),
            Cos(a) => emit(a, &|| -(g * self.at(a).sin())),
            Exp(a) => emit(a, &|| g * me),
            Tanh(a) => emit(a, &|| g * (-(me * me)).add_const(1.0)),
            Sigmoid(a) => emit(a, &|| g * (me * (-me).add_const(1.0))),
            Softplus(a) => emit(a, &|| g * self.at(a).sigmoid()),
            Silu(a) => emit(a, &|| g * self.at(a).silu_grad()),
            SiluGrad(a) => emit(a, &|| g * self.at(a).silu_grad2()),
            SiluGrad2(a) => emit(a, &|| {
                // silu''' = s' ((1 - 2s)(3 + x(1 - 2s)) - 2 x s'), s' = s(1 - s).
                let x = self.at(a);
                let s = x.sigmoid();
                let sp = s * (-s).add_const(1.0);
                let q = s.scale(-2.0).add_const(1.0);
                let inner = q * (x * q).add_const(3.0) - (x * sp).scale(2.0);
                g * (sp * inner)
            }),
            Sum(a) => emit(a, &|| {
                let (r, c) = self.at(a).shape();
                g.broadcast_scalar(r, c)
            }),
            SumRows(a) => emit(a, &|| g.broadcast_rows(self.at(a).shape().0)),
            SumCols(a) => emit(a, &|| g.broadcast_cols(self.at(a).shape().1)),
            BroadcastRows(a) => emit(a, &|| g.sum_rows()),
            BroadcastCols(a) => emit(a, &|| g.sum_cols()),
            BroadcastScalar(a) => emit(a, &|| g.sum()),
            Reshape(a) => emit(a, &|| {
                let (r, c) = self.at(a).shape();
                g.reshape(r, c)
            }),
            SliceCols(a, start) => emit(a, &|| g.pad_cols(start, self.at(a).shape().1)),
            PadCols(a, start) => emit(a, &|| g.slice_cols(start, self.at(a).shape().1)),
            ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.at(p).shape().1;
                    let o = off;
                    emit(p, &|| g.slice_cols(o, w));
                    off += w;
                }
            }
            Rfft(a) => emit(a, &|| g.rfft_adj()),
            RfftAdj(a) => emit(a, &|| g.rfft()),
            Irfft(a) => emit(a, &|| g.irfft_adj()),
            IrfftAdj(a) => emit(a, &|| g.irfft()),
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.value();
        (v.rows, v.cols)
    }

    /// Value of a `1 x 1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "item() on a non-scalar");
        v.data[0]
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn same_shape(self, other: Var<'t>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |x| x + c)
    }

    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let k = s.item();
        self.tape.push(self.value().map(|x| x * k), Op::MulScalar(self.id, s.id))
    }

    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let v = row_op(&self.value(), &row.value(), |a, b| a + b);
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let v = row_op(&self.value(), &row.value(), |a, b| a * b);
        self.tape.push(v, Op::MulRow(self.id, row.id))
    }

    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let a = self.value();
        let c = col.value();
        assert!(c.cols == 1 && c.rows == a.rows, "mul_col shape mismatch");
        let mut v = (*a).clone();
        for r in 0..a.rows {
            let k = c.data[r];
            v.data[r * a.cols..(r + 1) * a.cols].iter_mut().for_each(|x| *x *= k);
        }
        self.tape.push(v, Op::MulCol(self.id, col.id))
    }

    fn gemm(self, ta: bool, other: Var<'t>, tb: bool) -> Var<'t> {
        let v = Mat::gemm(&self.value(), ta, &other.value(), tb);
        self.tape.push(v, Op::Matmul(self.id, other.id, ta, tb))
    }

    /// `self * other`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.gemm(false, other, false)
    }

    /// `self * other^T`.
    pub fn matmul_nt(self, other: Var<'t>) -> Var<'t> {
        self.gemm(false, other, true)
    }

    /// `self^T * other`.
    pub fn matmul_tn(self, other: Var<'t>) -> Var<'t> {
        self.gemm(true, other, false)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), silu)
    }

    /// Elementwise first derivative of silu.
    pub fn silu_grad(self) -> Var<'t> {
        self.unary(Op::SiluGrad(self.id), silu_grad)
    }

    /// Elementwise second derivative of silu.
    pub fn silu_grad2(self) -> Var<'t> {
        self.unary(Op::SiluGrad2(self.id), silu_grad2)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Mat::scalar(s), Op::Sum(self.id))
    }

    /// Column sums, `1 x cols`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = sum_rows(&self.value());
        self.tape.push(v, Op::SumRows(self.id))
    }

    /// Row sums, `rows x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = sum_cols(&self.value());
        self.tape.push(v, Op::SumCols(self.id))
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.rows, 1, "broadcast_rows needs a row vector");
        self.tape.push(broadcast_rows(&a, rows), Op::BroadcastRows(self.id))
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.cols, 1, "broadcast_cols needs a column vector");
        self.tape.push(broadcast_cols(&a, cols), Op::BroadcastCols(self.id))
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'t> {
        let v = self.item();
        self.tape.push(Mat::filled(rows, cols, v), Op::BroadcastScalar(self.id))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), rows * cols, "reshape size mismatch");
        self.tape.push(Mat::new(rows, cols, a.data.clone()), Op::Reshape(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let v = slice_cols(&self.value(), start, len);
        self.tape.push(v, Op::SliceCols(self.id, start))
    }

    /// Zero-pads to `total` columns with `self` placed at column `start`.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let v = pad_cols(&self.value(), start, total);
        self.tape.push(v, Op::PadCols(self.id, start))
    }

    /// Row-wise real transform to the packed half-spectrum (see [`super::fft`]).
    pub fn rfft(self) -> Var<'t> {
        let v = fft::rfft_rows(&self.value());
        self.tape.push(v, Op::Rfft(self.id))
    }

    pub fn rfft_adj(self) -> Var<'t> {
        let v = fft::rfft_adj_rows(&self.value());
        self.tape.push(v, Op::RfftAdj(self.id))
    }

    pub fn irfft(self) -> Var<'t> {
        let v = fft::irfft_rows(&self.value());
        self.tape.push(v, Op::Irfft(self.id))
    }

    pub fn irfft_adj(self) -> Var<'t> {
        let v = fft::irfft_adj_rows(&self.value());
        self.tape.push(v, Op::IrfftAdj(self.id))
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "add");
        let v = self.value().zip_map(&rhs.value(), |a, b| a + b);
        self.tape.push(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "sub");
        let v = self.value().zip_map(&rhs.value(), |a, b| a - b);
        self.tape.push(v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "mul");
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b);
        self.tape.push(v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}
