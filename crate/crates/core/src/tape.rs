//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order, which is already a topological order of the computation graph.
//! [`Tape::backward`] walks the records in reverse, so each node is visited
//! exactly once, and adds the resulting gradients into the `grad` buffer of
//! every node that requires one. Buffers keep accumulating across calls until
//! [`Tape::zero_grad`].
//!
//! ```
//! use dafa_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
//! let loss = x.square().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, matmul_kernel, softmax_rows, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    DivScalar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Sum(usize),
    SumAxis(usize, Axis),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    LogSoftmax(usize, f64),
    Softmax(usize, f64),
}

/// Reduction axis of a 2-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows, keeping one value per column: `[m,n] -> [1,n]`.
    Rows,
    /// Collapse columns, keeping one value per row: `[m,n] -> [m,1]`.
    Cols,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Single-threaded; build a fresh tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
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

    /// Records `value` as a leaf, keeping its own `requires_grad` flag.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut value = value;
        value.zero_grad();
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that takes part in gradient computation.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of `var`, if backward has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.value
            .grad()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.value.zero_grad();
        }
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id].value;
        if !root.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        if !root.requires_grad() {
            return Err(Error::Contract(
                "loss is not connected to any tensor that requires a gradient".into(),
            ));
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adjoints[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = adjoints[id].take() else { continue };
            let node = &nodes[id];
            if !node.value.requires_grad() {
                continue;
            }
            for (operand, contribution) in local_gradients(&nodes, node, &g) {
                if !nodes[operand].value.requires_grad() {
                    continue;
                }
                match &mut adjoints[operand] {
                    Some(buf) => buf.iter_mut().zip(&contribution).for_each(|(b, c)| *b += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            adjoints[id] = Some(g);
        }

        for (node, adj) in nodes.iter_mut().zip(adjoints) {
            if let Some(g) = adj {
                node.value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, operands: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            operands.iter().any(|&i| nodes[i].value.requires_grad())
        };
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }
}

/// Gradient contributions of `node` to each of its operands, given the
/// adjoint `g` of its output.
fn local_gradients(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let bt = bv.transpose();
            let at = av.transpose();
            vec![
                (*a, matmul_kernel(g, bt.data(), m, n, k)),
                (*b, matmul_kernel(at.data(), g, k, m, n)),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::AddRow(a, row) => {
            let n = out.cols();
            let mut col_sums = vec![0.0; n];
            for chunk in g.chunks(n) {
                col_sums.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
            }
            vec![(*a, g.to_vec()), (*row, col_sums)]
        }
        Op::DivScalar(a, b) => {
            let av = val(*a).data();
            let bv = val(*b).item();
            let db = -g.iter().zip(av).map(|(g, a)| g * a).sum::<f64>() / (bv * bv);
            vec![(*a, g.iter().map(|g| g / bv).collect()), (*b, vec![db])]
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|g| g * s).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::Relu(a) => {
            let av = val(*a).data();
            vec![(*a, g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
        }
        Op::Log(a) => {
            let av = val(*a).data();
            vec![(*a, g.iter().zip(av).map(|(g, x)| g / x).collect())]
        }
        Op::Exp(a) => vec![(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
        Op::Square(a) => {
            let av = val(*a).data();
            vec![(*a, g.iter().zip(av).map(|(g, x)| 2.0 * g * x).collect())]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::SumAxis(a, axis) => {
            let av = val(*a);
            let (m, n) = (av.rows(), av.cols());
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = match axis {
                        Axis::Rows => g[j],
                        Axis::Cols => g[i],
                    };
                }
            }
            vec![(*a, d)]
        }
        Op::Transpose(a) => {
            let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).transpose();
            vec![(*a, gt.into_data())]
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let n = av.cols();
            let mut d = vec![0.0; av.len()];
            for (r, &src) in idx.iter().enumerate() {
                d[src * n..(src + 1) * n]
                    .iter_mut()
                    .zip(&g[r * n..(r + 1) * n])
                    .for_each(|(d, g)| *d += g);
            }
            vec![(*a, d)]
        }
        Op::LogSoftmax(a, tau) => {
            // d/dz of (z/tau - lse(z/tau)) applied to g: (g - p * sum(g)) / tau
            let n = out.cols();
            let mut d = Vec::with_capacity(g.len());
            for (g_row, y_row) in g.chunks(n).zip(out.data().chunks(n)) {
                let g_sum: f64 = g_row.iter().sum();
                d.extend(g_row.iter().zip(y_row).map(|(g, y)| (g - y.exp() * g_sum) / tau));
            }
            vec![(*a, d)]
        }
        Op::Softmax(a, tau) => {
            let n = out.cols();
            let mut d = Vec::with_capacity(g.len());
            for (g_row, s_row) in g.chunks(n).zip(out.data().chunks(n)) {
                let dot: f64 = g_row.iter().zip(s_row).map(|(g, s)| g * s).sum();
                d.extend(g_row.iter().zip(s_row).map(|(g, s)| s * (g - dot) / tau));
            }
            vec![(*a, d)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = self.value().clone();
        t.zero_grad();
        t.with_requires_grad(false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.value().requires_grad()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, data) = {
            let v = self.value();
            (v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.record(op, shape, data, &[self.id])
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (shape, data) = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape().to_vec(), data)
        };
        Ok(self.tape.record(op, shape, data, &[self.id, other.id]))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (m, n, data) = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            (m, n, matmul_kernel(a.data(), b.data(), m, k, n))
        };
        Ok(self
            .tape
            .record(Op::MatMul(self.id, other.id), vec![m, n], data, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row)?;
        let (shape, data) = {
            let (a, r) = (self.value(), row.value());
            if r.rows() != 1 || r.cols() != a.cols() || a.shape().len() != 2 {
                return Err(Error::dim("add_row", a.shape(), r.shape()));
            }
            let n = a.cols();
            let data = a
                .data()
                .chunks(n)
                .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(x, b)| x + b))
                .collect();
            (a.shape().to_vec(), data)
        };
        Ok(self
            .tape
            .record(Op::AddRow(self.id, row.id), shape, data, &[self.id, row.id]))
    }

    /// Divides every element by a scalar variable.
    pub fn div_scalar(&self, denom: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&denom)?;
        let (shape, data) = {
            let (a, d) = (self.value(), denom.value());
            if !d.is_scalar() {
                return Err(Error::dim("div_scalar", a.shape(), d.shape()));
            }
            let dv = d.item();
            if dv == 0.0 {
                return Err(Error::Validation("division by zero".into()));
            }
            (a.shape().to_vec(), a.data().iter().map(|x| x / dv).collect())
        };
        Ok(self
            .tape
            .record(Op::DivScalar(self.id, denom.id), shape, data, &[self.id, denom.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Validation(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.record(Op::Sum(self.id), vec![1, 1], vec![s], &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: Axis) -> Var<'t> {
        let (shape, data) = {
            let a = self.value();
            let (m, n) = (a.rows(), a.cols());
            match axis {
                Axis::Rows => {
                    let mut s = vec![0.0; n];
                    for row in a.data().chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    (vec![1, n], s)
                }
                Axis::Cols => (vec![m, 1], a.data().chunks(n).map(|r| r.iter().sum()).collect()),
            }
        };
        self.tape.record(Op::SumAxis(self.id, axis), shape, data, &[self.id])
    }

    pub fn mean_axis(&self, axis: Axis) -> Var<'t> {
        let count = {
            let a = self.value();
            match axis {
                Axis::Rows => a.rows(),
                Axis::Cols => a.cols(),
            }
        };
        self.sum_axis(axis).scale(1.0 / count as f64)
    }

    pub fn transpose(&self) -> Var<'t> {
        let t = self.value().transpose();
        let shape = t.shape().to_vec();
        self.tape
            .record(Op::Transpose(self.id), shape, t.into_data(), &[self.id])
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.value();
            let n = a.cols();
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows()) {
                return Err(Error::dim("gather_rows", a.shape(), &[bad]));
            }
            if indices.is_empty() {
                return Err(Error::Validation("gather_rows with no indices".into()));
            }
            let data = indices.iter().flat_map(|&i| a.row(i).iter().copied()).collect();
            (vec![indices.len(), n], data)
        };
        Ok(self
            .tape
            .record(Op::GatherRows(self.id, indices.to_vec()), shape, data, &[self.id]))
    }

    /// Fused, max-shifted `log_softmax(z / tau)` per row.
    pub fn log_softmax(&self, tau: f64) -> Result<Var<'t>> {
        check_tau(tau)?;
        let (shape, data) = {
            let a = self.value();
            (a.shape().to_vec(), log_softmax_rows(a.data(), a.cols(), tau))
        };
        Ok(self.tape.record(Op::LogSoftmax(self.id, tau), shape, data, &[self.id]))
    }

    /// `softmax(z / tau)` per row.
    pub fn softmax(&self, tau: f64) -> Result<Var<'t>> {
        let s = softmax_rows(&self.value(), tau)?;
        let shape = s.shape().to_vec();
        Ok(self
            .tape
            .record(Op::Softmax(self.id, tau), shape, s.into_data(), &[self.id]))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {tau}")))
    }
}
