//! Matrix-valued reverse-mode tape.
//!
//! Every node holds an eagerly computed [`Matrix`]. [`Tape::grad`] walks the
//! recorded operations backwards and emits the adjoints as *new nodes on the
//! same tape*, so a gradient is itself a differentiable expression. Taking
//! the gradient of something built from a gradient gives the second-order
//! terms needed to differentiate through an SGD step.
//!
//! Only the operations required by the multilayer perceptrons and losses in
//! this crate are provided.

use std::cell::RefCell;
use std::rc::Rc;

use super::Matrix;
use crate::error::{Error, Result};

/// Lower/upper bound applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// `x + 1·b` where `b` is a single row.
    AddRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    Sum(usize),
    Broadcast(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Log(usize),
    Recip(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | Sum(a)
            | Broadcast(a)
            | Reshape(a)
            | Relu(a)
            | Sigmoid(a)
            | Clamp(a, _, _)
            | Log(a)
            | Recip(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
}

/// Records matrix operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    /// An input that gradients never flow into.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push_unchecked(value, Op::Const)
    }

    pub fn value(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).as_scalar()
    }

    /// Copies a node's current value into a new constant, cutting the graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    fn push_unchecked(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        Ok(self.push_unchecked(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a.0, b.0), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a.0, k), "scale")
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a.0), "add_scalar")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(&self.value(b))?;
        self.push(v, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0), "transpose")
    }

    /// Adds the single-row `b` to every row of `x`.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{}x{} plus row {}x{}", xv.rows(), xv.cols(), bv.rows(), bv.cols()),
            ));
        }
        let cols = xv.cols();
        let mut out = (*xv).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % cols];
        }
        self.push(out, Op::AddRow(x.0, b.0), "add_row")
    }

    /// Column sums as a single row.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a.0), "sum_rows")
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&self, a: Var, rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::shape("broadcast_rows", "expected a single row"));
        }
        let mut data = Vec::with_capacity(rows * av.cols());
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let out = Matrix::new(rows, av.cols(), data)?;
        self.push(out, Op::BroadcastRows(a.0), "broadcast_rows")
    }

    /// Row sums as a single column.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Matrix::new(av.rows(), 1, data)?;
        self.push(out, Op::SumCols(a.0), "sum_cols")
    }

    /// Repeats a single column `cols` times.
    pub fn broadcast_cols(&self, a: Var, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.cols() != 1 {
            return Err(Error::shape("broadcast_cols", "expected a single column"));
        }
        let data = av
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        let out = Matrix::new(av.rows(), cols, data)?;
        self.push(out, Op::BroadcastCols(a.0), "broadcast_cols")
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a.0), "sum")
    }

    /// Fills a `rows x cols` matrix with the value of a 1x1 node.
    pub fn broadcast(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.value(a).as_scalar()?;
        self.push(Matrix::filled(rows, cols, s), Op::Broadcast(a.0), "broadcast")
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        self.push(v, Op::Reshape(a.0), "reshape")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), "relu")
    }

    /// Logistic function, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let v = self
            .value(a)
            .map(|x| sigmoid(x).clamp(PROB_EPS, 1.0 - PROB_EPS));
        self.push(v, Op::Sigmoid(a.0), "sigmoid")
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi), "clamp")
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a.0), "log")
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a.0), "recip")
    }

    /// `1 - a`.
    pub fn one_minus(&self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Gradient of the sum of `output`'s entries with respect to each of
    /// `wrt`, recorded as new nodes so it can be differentiated again.
    ///
    /// Inputs that `output` does not depend on get a zero constant.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let last = output.0;
        let relevant = {
            let nodes = self.nodes.borrow();
            let mut relevant = vec![false; last + 1];
            for w in wrt {
                if w.0 <= last {
                    relevant[w.0] = true;
                }
            }
            for i in 0..=last {
                if !relevant[i] {
                    relevant[i] = nodes[i]
                        .op
                        .parents()
                        .iter()
                        .flatten()
                        .any(|&p| relevant[p]);
                }
            }
            relevant
        };

        let mut adjoint: Vec<Option<Var>> = vec![None; last + 1];
        if relevant[last] {
            let (r, c) = self.shape(output);
            adjoint[last] = Some(self.constant(Matrix::filled(r, c, 1.0)));
        }

        for i in (0..=last).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes.borrow()[i].op;
            for (parent, contribution) in self.vjp(Var(i), op, g, &relevant)? {
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(*w);
                    Ok(self.constant(Matrix::zeros(r, c)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of one node, for parents on a path to the
    /// differentiation targets.
    fn vjp(&self, out: Var, op: Op, g: Var, relevant: &[bool]) -> Result<Vec<(usize, Var)>> {
        let mut res = Vec::with_capacity(2);
        let wants = |p: usize| relevant[p];
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if wants(a) {
                    res.push((a, g));
                }
                if wants(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    res.push((a, g));
                }
                if wants(b) {
                    res.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    res.push((a, self.mul(g, Var(b))?));
                }
                if wants(b) {
                    res.push((b, self.mul(g, Var(a))?));
                }
            }
            Op::Scale(a, k) => res.push((a, self.scale(g, k)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::MatMul(a, b) => {
                if wants(a) {
                    let bt = self.transpose(Var(b))?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if wants(b) {
                    let at = self.transpose(Var(a))?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::AddRow(x, b) => {
                if wants(x) {
                    res.push((x, g));
                }
                if wants(b) {
                    res.push((b, self.sum_rows(g)?));
                }
            }
            Op::SumRows(a) => {
                let rows = self.shape(Var(a)).0;
                res.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a) => res.push((a, self.sum_rows(g)?)),
            Op::SumCols(a) => {
                let cols = self.shape(Var(a)).1;
                res.push((a, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(a) => res.push((a, self.sum_cols(g)?)),
            Op::Sum(a) => {
                let (r, c) = self.shape(Var(a));
                res.push((a, self.broadcast(g, r, c)?));
            }
            Op::Broadcast(a) => res.push((a, self.sum(g)?)),
            Op::Reshape(a) => {
                let (r, c) = self.shape(Var(a));
                res.push((a, self.reshape(g, r, c)?));
            }
            Op::Relu(a) => {
                let mask = self.constant(self.value(Var(a)).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                res.push((a, self.mul(g, mask)?));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.one_minus(out)?;
                let slope = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, slope)?));
            }
            Op::Clamp(a, lo, hi) => {
                let mask = self.constant(
                    self.value(Var(a))
                        .map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 }),
                );
                res.push((a, self.mul(g, mask)?));
            }
            Op::Log(a) => {
                let r = self.recip(Var(a))?;
                res.push((a, self.mul(g, r)?));
            }
            Op::Recip(a) => {
                let sq = self.mul(out, out)?;
                let neg = self.scale(sq, -1.0)?;
                res.push((a, self.mul(g, neg)?));
            }
        }
        Ok(res)
    }
}
