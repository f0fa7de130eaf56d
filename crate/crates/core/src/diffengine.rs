//! Tape-based reverse-mode differentiation over dense 2D arrays.
//!
//! Every value is a row-major matrix (`rows x cols`, scalars are `1 x 1`).
//! Operations append nodes to a [`Tape`]; [`grad`] walks the tape backwards
//! and records the vector-Jacobian products as ordinary tape operations, so
//! the gradients it returns can themselves be differentiated. This is what
//! lets a loss contain spatial gradients of the network and still be
//! differentiated with respect to the weights and the latent code.
//!
//! [`grad_values`] performs the same walk but hands back plain arrays and
//! discards the recorded nodes afterwards.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::{Error, Result};

/// Below this norm a row-norm gradient is taken to be zero.
pub const NORM_EPSILON: f64 = 1e-12;

/// `softplus` switches to the identity once `beta * x` exceeds this.
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;

// Shape and constant operands that the backward pass does not need are kept
// for `Debug` output.
#[allow(dead_code)]
#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Abs(usize),
    Exp(usize),
    Softplus(usize, f64),
    Sigmoid(usize, f64),
    RowNorm(usize),
    RecipGuarded(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    Broadcast(usize, usize, usize),
    Concat(usize, usize),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    PadRows(usize, usize, usize),
}

impl Op {
    fn inputs(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            MatMul { a, b, .. } => ([a, b], 2),
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | Concat(a, b) => ([a, b], 2),
            Neg(a) | Scale(a, _) | AddScalar(a, _) | Abs(a) | Exp(a) | Softplus(a, _) | Sigmoid(a, _)
            | RowNorm(a) | RecipGuarded(a) | Sum(a) | SumRows(a) | SumCols(a) | BroadcastRows(a, _)
            | BroadcastCols(a, _) | Broadcast(a, _, _) | SliceCols(a, _, _) | PadCols(a, _, _)
            | SliceRows(a, _, _) | PadRows(a, _, _) => ([a, 0], 1),
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of a computation. Single-threaded; build one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
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

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// New leaf. Whether it is differentiated is decided by the caller of [`grad`].
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Array2::from_elem((1, 1), value))
    }

    /// `1 x n` leaf from a slice.
    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.var(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// Drops every node recorded after the first `len`, so a loop can reuse
    /// leaves created before `len` without the tape growing. Vars created
    /// after `len` must not be used afterwards.
    pub fn rewind(&self, len: usize) {
        self.truncate(len);
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(value, op)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(value, op)
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: operand shapes differ");
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_value(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > SOFTPLUS_THRESHOLD {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.with_value(|v| {
            assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
            v[[0, 0]]
        })
    }

    /// Copy of the value with no graph linkage.
    pub fn detach(&self) -> Var<'t> {
        self.tape.var(self.value())
    }

    fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        self.tape.binary(self.id, other.id, Op::MatMul { a: self.id, b: other.id, ta, tb }, |a, b| {
            let a = if ta { a.t() } else { a.view() };
            let b = if tb { b.t() } else { b.view() };
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
            a.dot(&b)
        })
    }

    /// Matrix product. Panics when inner dimensions differ; see [`Var::try_matmul`].
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    pub fn try_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.1 != b.0 {
            return Err(Error::ShapeMismatch(format!("matmul {a:?} x {b:?}")));
        }
        Ok(self.matmul(other))
    }

    /// `self + row` with the `1 x n` row broadcast over every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, row.id, Op::AddRow(self.id, row.id), |a, r| {
            assert_eq!(r.nrows(), 1, "add_row: bias must be a single row");
            assert_eq!(a.ncols(), r.ncols(), "add_row: column counts differ");
            a + r
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id, c), |a| a + c)
    }

    /// Elementwise `|x|`; the derivative at 0 is taken as 0.
    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Abs(self.id), |a| a.mapv(f64::abs))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.mapv(f64::exp))
    }

    /// `(1/beta) * ln(1 + exp(beta * x))`, identity above the overflow threshold.
    pub fn softplus(self, beta: f64) -> Var<'t> {
        assert!(beta > 0.0, "softplus beta must be positive");
        self.tape.unary(self.id, Op::Softplus(self.id, beta), |a| a.mapv(|x| softplus_value(x, beta)))
    }

    /// `1 / (1 + exp(-beta * x))`, the derivative of `softplus(beta)`.
    pub fn sigmoid(self, beta: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id, beta), |a| a.mapv(|x| sigmoid(beta * x)))
    }

    /// Euclidean norm of each row, `m x n -> m x 1`.
    pub fn row_norm(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RowNorm(self.id), |a| {
            a.map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1))
        })
    }

    fn recip_guarded(self) -> Var<'t> {
        self.tape.unary(self.id, Op::RecipGuarded(self.id), |a| {
            a.mapv(|x| if x > NORM_EPSILON { 1.0 / x } else { 0.0 })
        })
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| Array2::from_elem((1, 1), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|v| v.len());
        assert!(n > 0, "mean of an empty value");
        self.sum().scale(1.0 / n as f64)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumRows(self.id), |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)))
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    /// `1 x n -> rows x n`.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastRows(self.id, rows), |a| {
            assert_eq!(a.nrows(), 1, "broadcast_rows expects a single row");
            a.broadcast((rows, a.ncols())).expect("broadcast").to_owned()
        })
    }

    /// `m x 1 -> m x cols`.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastCols(self.id, cols), |a| {
            assert_eq!(a.ncols(), 1, "broadcast_cols expects a single column");
            a.broadcast((a.nrows(), cols)).expect("broadcast").to_owned()
        })
    }

    /// `1 x 1 -> rows x cols`.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Broadcast(self.id, rows, cols), |a| {
            assert_eq!(a.dim(), (1, 1), "broadcast expects a scalar");
            Array2::from_elem((rows, cols), a[[0, 0]])
        })
    }

    /// Concatenation along the last (column) dimension.
    pub fn concat(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.0 != b.0 {
            return Err(Error::ShapeMismatch(format!("concat {a:?} with {b:?}")));
        }
        Ok(self.tape.binary(self.id, other.id, Op::Concat(self.id, other.id), |a, b| {
            concatenate(Axis(1), &[a.view(), b.view()]).expect("concat")
        }))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SliceCols(self.id, start, end), |a| a.slice(s![.., start..end]).to_owned())
    }

    fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::PadCols(self.id, start, total), |a| {
            let mut out = Array2::zeros((a.nrows(), total));
            out.slice_mut(s![.., start..start + a.ncols()]).assign(a);
            out
        })
    }

    /// Rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SliceRows(self.id, start, end), |a| a.slice(s![start..end, ..]).to_owned())
    }

    fn pad_rows(self, start: usize, total: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::PadRows(self.id, start, total), |a| {
            let mut out = Array2::zeros((total, a.ncols()));
            out.slice_mut(s![start..start + a.nrows(), ..]).assign(a);
            out
        })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| {
            same_shape(a, b, "add");
            a + b
        })
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| {
            same_shape(a, b, "sub");
            a - b
        })
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| {
            same_shape(a, b, "mul");
            a * b
        })
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| -a)
    }
}

/// `input * weights + bias`, with `bias` a `1 x n` row.
pub fn affine<'t>(input: Var<'t>, weights: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (i, w, b) = (input.shape(), weights.shape(), bias.shape());
    if i.1 != w.0 || b != (1, w.1) {
        return Err(Error::ShapeMismatch(format!(
            "affine: input {i:?}, weights {w:?}, bias {b:?}"
        )));
    }
    Ok(input.matmul(weights).add_row(bias))
}

/// Vector-Jacobian product contributions of node `id` given its upstream
/// gradient `g`, for the inputs accepted by `wanted`.
fn vjp<'t>(tape: &'t Tape, id: usize, g: Var<'t>, wanted: impl Fn(usize) -> bool) -> Vec<(usize, Var<'t>)> {
    let op = tape.nodes.borrow()[id].op;
    let v = |i: usize| Var { tape, id: i };
    let out = v(id);
    let mut contrib = Vec::with_capacity(2);
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            if wanted(a) {
                let da = match (ta, tb) {
                    (false, false) => g.matmul_t(v(b), false, true),
                    (false, true) => g.matmul_t(v(b), false, false),
                    (true, false) => v(b).matmul_t(g, false, true),
                    (true, true) => v(b).matmul_t(g, true, true),
                };
                contrib.push((a, da));
            }
            if wanted(b) {
                let db = match (ta, tb) {
                    (false, false) => v(a).matmul_t(g, true, false),
                    (false, true) => g.matmul_t(v(a), true, false),
                    (true, false) => v(a).matmul_t(g, false, false),
                    (true, true) => g.matmul_t(v(a), true, true),
                };
                contrib.push((b, db));
            }
        }
        Op::Add(a, b) => {
            if wanted(a) {
                contrib.push((a, g));
            }
            if wanted(b) {
                contrib.push((b, g));
            }
        }
        Op::Sub(a, b) => {
            if wanted(a) {
                contrib.push((a, g));
            }
            if wanted(b) {
                contrib.push((b, -g));
            }
        }
        Op::Mul(a, b) => {
            if wanted(a) {
                contrib.push((a, g * v(b)));
            }
            if wanted(b) {
                contrib.push((b, g * v(a)));
            }
        }
        Op::AddRow(a, r) => {
            if wanted(a) {
                contrib.push((a, g));
            }
            if wanted(r) {
                contrib.push((r, g.sum_rows()));
            }
        }
        Op::Neg(a) => contrib.push((a, -g)),
        Op::Scale(a, c) => contrib.push((a, g.scale(c))),
        Op::AddScalar(a, _) => contrib.push((a, g)),
        Op::Abs(a) => {
            let sign = v(a).with_value(|x| x.mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
            contrib.push((a, g * tape.var(sign)));
        }
        Op::Exp(a) => contrib.push((a, g * out)),
        Op::Softplus(a, beta) => contrib.push((a, g * v(a).sigmoid(beta))),
        Op::Sigmoid(a, beta) => {
            let slope = (out - out * out).scale(beta);
            contrib.push((a, g * slope));
        }
        Op::RowNorm(a) => {
            let cols = v(a).shape().1;
            let coef = (g * out.recip_guarded()).broadcast_cols(cols);
            contrib.push((a, coef * v(a)));
        }
        Op::RecipGuarded(a) => contrib.push((a, -(g * (out * out)))),
        Op::Sum(a) => {
            let (r, c) = v(a).shape();
            contrib.push((a, g.broadcast(r, c)));
        }
        Op::SumRows(a) => contrib.push((a, g.broadcast_rows(v(a).shape().0))),
        Op::SumCols(a) => contrib.push((a, g.broadcast_cols(v(a).shape().1))),
        Op::BroadcastRows(a, _) => contrib.push((a, g.sum_rows())),
        Op::BroadcastCols(a, _) => contrib.push((a, g.sum_cols())),
        Op::Broadcast(a, _, _) => contrib.push((a, g.sum())),
        Op::Concat(a, b) => {
            let na = v(a).shape().1;
            let nb = v(b).shape().1;
            if wanted(a) {
                contrib.push((a, g.slice_cols(0, na)));
            }
            if wanted(b) {
                contrib.push((b, g.slice_cols(na, na + nb)));
            }
        }
        Op::SliceCols(a, start, _) => contrib.push((a, g.pad_cols(start, v(a).shape().1))),
        Op::PadCols(a, start, _) => contrib.push((a, g.slice_cols(start, start + v(a).shape().1))),
        Op::SliceRows(a, start, _) => contrib.push((a, g.pad_rows(start, v(a).shape().0))),
        Op::PadRows(a, start, _) => contrib.push((a, g.slice_rows(start, start + v(a).shape().0))),
    }
    contrib.retain(|(i, _)| wanted(*i));
    contrib
}

fn backward<'t>(output: Var<'t>, leaves: &[Var<'t>]) -> Vec<Option<Var<'t>>> {
    let tape = output.tape;
    for l in leaves {
        assert!(std::ptr::eq(l.tape, tape), "leaf belongs to a different tape");
    }
    let Some(lowest) = leaves.iter().map(|l| l.id).min() else {
        return Vec::new();
    };
    if lowest > output.id {
        return vec![None; leaves.len()];
    }
    // nodes between the lowest leaf and the output that depend on a requested leaf
    let span = output.id - lowest + 1;
    let mut depends = vec![false; span];
    for l in leaves {
        if l.id <= output.id {
            depends[l.id - lowest] = true;
        }
    }
    {
        let nodes = tape.nodes.borrow();
        for id in lowest..=output.id {
            if depends[id - lowest] {
                continue;
            }
            let (inputs, n) = nodes[id].op.inputs();
            depends[id - lowest] = inputs[..n].iter().any(|&j| j >= lowest && depends[j - lowest]);
        }
    }
    if !depends[span - 1] {
        return vec![None; leaves.len()];
    }
    let wanted = |j: usize| j >= lowest && j <= output.id && depends[j - lowest];

    let mut grads: Vec<Option<Var<'t>>> = vec![None; span];
    let seed = output.with_value(|v| Array2::ones(v.dim()));
    grads[span - 1] = Some(tape.var(seed));
    for id in (lowest..=output.id).rev() {
        let Some(g) = grads[id - lowest] else { continue };
        for (j, c) in vjp(tape, id, g, wanted) {
            let slot = &mut grads[j - lowest];
            *slot = Some(match *slot {
                Some(acc) => acc + c,
                None => c,
            });
        }
    }
    leaves.iter().map(|l| if l.id <= output.id { grads[l.id - lowest] } else { None }).collect()
}

/// Gradients of `output` (the sum of its entries when not scalar) with
/// respect to each leaf. The results are themselves differentiable. A leaf
/// the output does not depend on gets a zero gradient.
pub fn grad<'t>(output: Var<'t>, leaves: &[Var<'t>]) -> Vec<Var<'t>> {
    let grads = backward(output, leaves);
    leaves
        .iter()
        .zip(grads)
        .map(|(l, g)| g.unwrap_or_else(|| output.tape.var(Array2::zeros(l.shape()))))
        .collect()
}

/// Like [`grad`] but returns plain arrays and leaves the tape as it was.
pub fn grad_values<'t>(output: Var<'t>, leaves: &[Var<'t>]) -> Vec<Array2<f64>> {
    let tape = output.tape;
    let mark = tape.len();
    let grads = backward(output, leaves);
    let values = leaves
        .iter()
        .zip(grads)
        .map(|(l, g)| match g {
            Some(g) => g.value(),
            None => Array2::zeros(l.shape()),
        })
        .collect();
    tape.truncate(mark);
    values
}

/// Elementwise `a += b`, shared by optimizers and gradient accumulation.
pub fn accumulate(acc: &mut Array2<f64>, other: &Array2<f64>) {
    Zip::from(acc).and(other).for_each(|a, &b| *a += b);
}
