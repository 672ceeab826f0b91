//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the record is acyclic by
//! construction and the backward sweep is a single reverse scan.
//! Parameters enter the tape through [`Tape::param`]; after
//! [`Tape::backward`] their gradients are *added* to the owning
//! [`ParamStore`], which keeps accumulating until it is reset.

use std::rc::Rc;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Unordered node pairs, shared between the ops that read them.
pub type EdgeList = Rc<[(usize, usize)]>;

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Transpose(Var),
    /// Mean over rows: r×c → 1×c.
    MeanRows(Var),
    /// Max over rows: r×c → 1×c, remembering the winning row per column.
    MaxRows(Var, Rc<[usize]>),
    Sum(Var),
    /// Sum over columns: r×c → r×1.
    RowSums(Var),
    /// 1×c → r×c.
    BroadcastRow(Var),
    /// r×1 → r×c.
    BroadcastCol(Var),
    /// n×p → m×1 with entry e = ⟨h_i, h_j⟩ for edge e = (i, j).
    PairDot(Var, EdgeList),
    /// m×1 → n×n symmetric matrix with w_e at (i, j) and (j, i).
    ScatterSym(Var, EdgeList),
    ConcatRows(Rc<[Var]>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// One forward computation record.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which parameters enter as constants. Used for the
    /// gradient-free passes (prototypes, EVT fitting, evaluation).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// Insert a parameter leaf. On a `no_grad` tape it behaves as a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let needs = self.grad_enabled;
        self.push(value, Op::Leaf(Some(id)), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.unary(a, value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = m.shape();
        let mut out = Matrix::zeros(1, c);
        for i in 0..r {
            for (o, x) in out.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / r as f64;
        out.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
        self.unary(a, out, Op::MeanRows(a))
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = m.shape();
        let mut out = Matrix::filled(1, c, f64::NEG_INFINITY);
        let mut arg = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                if m[(i, j)] > out[(0, j)] {
                    out[(0, j)] = m[(i, j)];
                    arg[j] = i;
                }
            }
        }
        self.unary(a, out, Op::MaxRows(a, arg.into()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = Matrix::from_vec(m.rows(), 1, data);
        self.unary(a, value, Op::RowSums(a))
    }

    /// Repeat a 1×c row vector `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), 1, "broadcast_row expects a row vector");
        let mut data = Vec::with_capacity(rows * m.cols());
        for _ in 0..rows {
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows, m.cols(), data);
        self.unary(a, value, Op::BroadcastRow(a))
    }

    /// Repeat an r×1 column vector `cols` times.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.cols(), 1, "broadcast_col expects a column vector");
        let mut data = Vec::with_capacity(m.rows() * cols);
        for &x in m.as_slice() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let value = Matrix::from_vec(m.rows(), cols, data);
        self.unary(a, value, Op::BroadcastCol(a))
    }

    /// Inner products of the row pairs named by `edges`, as an m×1 column.
    pub fn pair_dot(&mut self, h: Var, edges: EdgeList) -> Var {
        let m = self.value(h);
        let data = edges
            .iter()
            .map(|&(i, j)| m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let value = Matrix::from_vec(edges.len(), 1, data);
        self.unary(h, value, Op::PairDot(h, edges))
    }

    /// Place edge weights into a dense symmetric n×n matrix; all other
    /// entries are zero.
    pub fn scatter_sym(&mut self, w: Var, edges: EdgeList, n: usize) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.shape(), (edges.len(), 1), "scatter_sym weight shape");
        let mut out = Matrix::zeros(n, n);
        for (e, &(i, j)) in edges.iter().enumerate() {
            out[(i, j)] = wv[(e, 0)];
            out[(j, i)] = wv[(e, 0)];
        }
        self.unary(w, out, Op::ScatterSym(w, edges))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.into()),
            needs,
        )
    }

    /// Propagate d(output)/d(node) back to every parameter leaf and add the
    /// result into `store`'s gradient buffers.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, contrib: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf(Some(id)) => store.accumulate_grad(*id, &g),
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.matmul(&self.value(*b).transpose()));
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).transpose().matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::AddScalar(a) => send(*a, g),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Relu(a) => send(
                    *a,
                    g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                ),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Ln(a) => send(*a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Square(a) => send(*a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let inv = 1.0 / r as f64;
                    let mut out = Matrix::zeros(r, c);
                    for i in 0..r {
                        for (o, x) in out.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = x * inv;
                        }
                    }
                    send(*a, out);
                }
                Op::MaxRows(a, arg) => {
                    let (r, c) = self.value(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    for (j, &i) in arg.iter().enumerate() {
                        out[(i, j)] = g[(0, j)];
                    }
                    send(*a, out);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item()));
                }
                Op::RowSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    for i in 0..r {
                        out.row_mut(i).fill(g[(i, 0)]);
                    }
                    send(*a, out);
                }
                Op::BroadcastRow(a) => {
                    let c = g.cols();
                    let mut out = Matrix::zeros(1, c);
                    for i in 0..g.rows() {
                        for (o, x) in out.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    send(*a, out);
                }
                Op::BroadcastCol(a) => {
                    let data = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                    send(*a, Matrix::from_vec(g.rows(), 1, data));
                }
                Op::PairDot(h, edges) => {
                    let hv = self.value(*h);
                    let mut out = Matrix::zeros(hv.rows(), hv.cols());
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        let ge = g[(e, 0)];
                        for k in 0..hv.cols() {
                            out[(i, k)] += ge * hv[(j, k)];
                            out[(j, k)] += ge * hv[(i, k)];
                        }
                    }
                    send(*h, out);
                }
                Op::ScatterSym(w, edges) => {
                    let data = edges.iter().map(|&(i, j)| g[(i, j)] + g[(j, i)]).collect();
                    send(*w, Matrix::from_vec(edges.len(), 1, data));
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let r = self.value(p).rows();
                        let slice = g.as_slice()[offset * cols..(offset + r) * cols].to_vec();
                        send(p, Matrix::from_vec(r, cols, slice));
                        offset += r;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
