//! Reverse-mode automatic differentiation over small dense arrays.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are pushed, so forward results can be inspected while the graph is still
//! being built. [`Graph::backward`] walks the nodes in reverse insertion order,
//! which is a valid topological order because operands always precede the
//! nodes that consume them. A graph is meant to live for exactly one loss
//! evaluation and then be dropped.
//!
//! ```
//! use domrl::ad::Graph;
//! use domrl::Array;
//!
//! let g = Graph::new();
//! let x = g.param(Array::scalar(2.0));
//! let y = g.param(Array::scalar(3.0));
//! let z = g.mul(x, y).unwrap();
//! let grads = g.backward(z).unwrap();
//! assert_eq!(grads.wrt(x).item(), 3.0);
//! assert_eq!(grads.wrt(y).item(), 2.0);
//! ```

use std::cell::RefCell;

use crate::array::Array;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    /// Whether any parameter leaf is reachable from this node.
    needs_grad: bool,
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => [Some(*a), Some(*b)],
            Op::Scale(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a) => [Some(*a), None],
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Array>,
}

impl Gradients {
    /// ∂root/∂v. Constants and nodes the root does not depend on have zero
    /// gradient.
    pub fn wrt(&self, v: Var) -> &Array {
        &self.grads[v.0]
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn require_matrix(op: &'static str, a: &Array) -> Result<()> {
    if a.rank() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("expected a matrix, got shape {:?}", a.shape()),
        });
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows(x: &Array) -> Array {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Current value of a node (cloned).
    pub fn value(&self, v: Var) -> Array {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Array, &Array) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn push(&self, op_name: &'static str, value: Array, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                location: None,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().flatten().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Array, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant; its gradient is reported as zero.
    pub fn constant(&self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(shape_err("add", x, y));
            }
            Ok(x.zip(y, |p, q| p + q))
        })?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(shape_err("sub", x, y));
            }
            Ok(x.zip(y, |p, q| p - q))
        })?;
        self.push("sub", value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(shape_err("mul", x, y));
            }
            Ok(x.zip(y, |p, q| p * q))
        })?;
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let value = self.with(a, |x| x.map(|v| v * factor));
        self.push("scale", value, Op::Scale(a, factor))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |x, y| {
            require_matrix("matmul", x)?;
            require_matrix("matmul", y)?;
            if x.cols() != y.rows() {
                return Err(shape_err("matmul", x, y));
            }
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            Array::new(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))
        })?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| {
            if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
            Ok(x.map(f64::ln))
        })?;
        self.push("log", value, Op::Log(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| x.map(f64::exp));
        self.push("exp", value, Op::Exp(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| x.map(f64::tanh));
        self.push("tanh", value, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| {
            if x.rank() == 0 {
                return Err(Error::Shape {
                    op: "softmax",
                    detail: "scalar input".into(),
                });
            }
            Ok(softmax_rows(x))
        })?;
        self.push("softmax", value, Op::SoftmaxRows(a))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with(table, |t| {
            require_matrix("gather_rows", t)?;
            let mut data = Vec::with_capacity(indices.len() * t.cols());
            for &i in indices {
                if i >= t.rows() {
                    return Err(Error::Shape {
                        op: "gather_rows",
                        detail: format!("row {i} out of range for {} rows", t.rows()),
                    });
                }
                data.extend_from_slice(t.row(i));
            }
            Array::new(vec![indices.len(), t.cols()], data)
        })?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows(table, indices.to_vec()),
        )
    }

    /// Picks one entry per row: `out[r] = a[r, indices[r]]`.
    pub fn pick(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with(a, |x| {
            require_matrix("pick", x)?;
            if indices.len() != x.rows() {
                return Err(Error::Shape {
                    op: "pick",
                    detail: format!("{} indices for {} rows", indices.len(), x.rows()),
                });
            }
            let mut data = Vec::with_capacity(indices.len());
            for (r, &c) in indices.iter().enumerate() {
                if c >= x.cols() {
                    return Err(Error::Shape {
                        op: "pick",
                        detail: format!("column {c} out of range for {} columns", x.cols()),
                    });
                }
                data.push(x.get(r, c));
            }
            Ok(Array::vector(data))
        })?;
        self.push("pick", value, Op::Pick(a, indices.to_vec()))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| Array::scalar(x.data().iter().sum()));
        self.push("sum", value, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| {
            if x.is_empty() {
                return Err(Error::Shape {
                    op: "mean",
                    detail: "empty array".into(),
                });
            }
            Ok(Array::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        })?;
        self.push("mean", value, Op::Mean(a))
    }

    /// Mean over the first axis of a matrix, giving a `[1, n]` row.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |x| {
            require_matrix("mean_rows", x)?;
            if x.rows() == 0 {
                return Err(Error::Shape {
                    op: "mean_rows",
                    detail: "no rows".into(),
                });
            }
            let mut out = vec![0.0; x.cols()];
            for r in 0..x.rows() {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            let m = x.rows() as f64;
            out.iter_mut().for_each(|o| *o /= m);
            Array::new(vec![1, x.cols()], out)
        })?;
        self.push("mean_rows", value, Op::MeanRows(a))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = self.with2(a, row, |x, r| {
            require_matrix("add_row", x)?;
            if r.shape() != [1, x.cols()] {
                return Err(shape_err("add_row", x, r));
            }
            let mut out = x.clone();
            let cols = x.cols();
            for chunk in out.data_mut().chunks_mut(cols) {
                for (o, v) in chunk.iter_mut().zip(r.data()) {
                    *o += v;
                }
            }
            Ok(out)
        })?;
        self.push("add_row", value, Op::AddRow(a, row))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |x, y| {
            require_matrix("concat_cols", x)?;
            require_matrix("concat_cols", y)?;
            if x.rows() != y.rows() {
                return Err(shape_err("concat_cols", x, y));
            }
            let mut data = Vec::with_capacity(x.len() + y.len());
            for r in 0..x.rows() {
                data.extend_from_slice(x.row(r));
                data.extend_from_slice(y.row(r));
            }
            Array::new(vec![x.rows(), x.cols() + y.cols()], data)
        })?;
        self.push("concat_cols", value, Op::ConcatCols(a, b))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].needs_grad {
            grads[root.0] = Some(Array::filled(nodes[root.0].value.shape(), 1.0));
        }

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].clone() else {
                continue;
            };
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let need = |v: Var| nodes[v.0].needs_grad;
            let mut acc = |v: Var, contrib: Array| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(val(*b), |gv, bv| gv * bv);
                    let gb = g.zip(val(*a), |gv, av| gv * av);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if need(*a) {
                        let bt = transpose_raw(bv.data(), k, n);
                        let ga = matmul_raw(g.data(), &bt, m, n, k);
                        acc(*a, Array::new(vec![m, k], ga)?);
                    }
                    if need(*b) {
                        let at = transpose_raw(av.data(), m, k);
                        let gb = matmul_raw(&at, g.data(), k, m, n);
                        acc(*b, Array::new(vec![k, n], gb)?);
                    }
                }
                Op::Log(a) => acc(*a, g.zip(val(*a), |gv, x| gv / x)),
                Op::Exp(a) => acc(*a, g.zip(y, |gv, yv| gv * yv)),
                Op::Tanh(a) => acc(*a, g.zip(y, |gv, yv| gv * (1.0 - yv * yv))),
                Op::SoftmaxRows(a) => {
                    let cols = y.cols();
                    let mut out = g.clone();
                    for (o_row, y_row) in out.data_mut().chunks_mut(cols).zip(y.data().chunks(cols))
                    {
                        let dot: f64 = o_row.iter().zip(y_row).map(|(gv, yv)| gv * yv).sum();
                        for (o, yv) in o_row.iter_mut().zip(y_row) {
                            *o = yv * (*o - dot);
                        }
                    }
                    acc(*a, out);
                }
                Op::GatherRows(t, idx) => {
                    let tv = val(*t);
                    let cols = tv.cols();
                    let mut out = Array::zeros(tv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(*t, out);
                }
                Op::Pick(a, idx) => {
                    let av = val(*a);
                    let cols = av.cols();
                    let mut out = Array::zeros(av.shape());
                    for (r, &c) in idx.iter().enumerate() {
                        out.data_mut()[r * cols + c] += g.data()[r];
                    }
                    acc(*a, out);
                }
                Op::Sum(a) => acc(*a, Array::filled(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let av = val(*a);
                    acc(*a, Array::filled(av.shape(), g.item() / av.len() as f64));
                }
                Op::MeanRows(a) => {
                    let av = val(*a);
                    let m = av.rows() as f64;
                    let mut out = Array::zeros(av.shape());
                    let cols = av.cols();
                    for chunk in out.data_mut().chunks_mut(cols) {
                        for (o, gv) in chunk.iter_mut().zip(g.data()) {
                            *o = gv / m;
                        }
                    }
                    acc(*a, out);
                }
                Op::AddRow(a, row) => {
                    let cols = y.cols();
                    let mut grow = vec![0.0; cols];
                    for chunk in g.data().chunks(cols) {
                        for (o, gv) in grow.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                    acc(*a, g);
                    acc(*row, Array::new(vec![1, cols], grow)?);
                }
                Op::ConcatCols(a, b) => {
                    let (ac, bc) = (val(*a).cols(), val(*b).cols());
                    let rows = y.rows();
                    let mut ga = Vec::with_capacity(rows * ac);
                    let mut gb = Vec::with_capacity(rows * bc);
                    for chunk in g.data().chunks(ac + bc) {
                        ga.extend_from_slice(&chunk[..ac]);
                        gb.extend_from_slice(&chunk[ac..]);
                    }
                    acc(*a, Array::new(vec![rows, ac], ga)?);
                    acc(*b, Array::new(vec![rows, bc], gb)?);
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.unwrap_or_else(|| Array::zeros(n.value.shape())))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar from parameter leaves. Returns the maximum over all
/// coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(f: F, params: &[Array], epsilon: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let root = f(&graph, &vars)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Array> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();
    drop(graph);

    let eval = |probe: &[Array], which: usize, coord: usize| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.param(p.clone())).collect();
        let located = |e: Error| match e {
            Error::NonFinite { op, .. } => Error::NonFinite {
                op,
                location: Some(format!("param {which} coordinate {coord}")),
            },
            other => other,
        };
        let root = f(&g, &vars).map_err(located)?;
        let v = g.scalar(root);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_check",
                location: Some(format!("param {which} coordinate {coord}")),
            });
        }
        Ok(v)
    };

    let mut probe: Vec<Array> = params.to_vec();
    let mut worst = 0.0f64;
    for (which, param) in params.iter().enumerate() {
        for coord in 0..param.len() {
            let base = param.data()[coord];
            probe[which].data_mut()[coord] = base + epsilon;
            let plus = eval(&probe, which, coord)?;
            probe[which].data_mut()[coord] = base - epsilon;
            let minus = eval(&probe, which, coord)?;
            probe[which].data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[which].data()[coord] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Array {
        Array::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let z = g.constant(Array::vector(vec![0.0, 0.0]));
        let s = g.softmax_rows(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_of_one_is_zero() {
        let g = Graph::new();
        let x = g.constant(Array::scalar(1.0));
        assert_eq!(g.scalar(g.log(x).unwrap()), 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let g = Graph::new();
        let x = g.constant(Array::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_with_identity() {
        let g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Graph::new();
        let a = g.constant(Array::vector(vec![1.0, 2.0]));
        let b = g.constant(Array::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let x = g.constant(Array::zeros(&[2, 3]));
        let y = g.constant(Array::zeros(&[2, 3]));
        assert!(matches!(g.matmul(x, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn product_rule() {
        let g = Graph::new();
        let x = g.param(Array::scalar(2.0));
        let y = g.param(Array::scalar(3.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).item(), 3.0);
        assert_eq!(grads.wrt(y).item(), 2.0);
    }

    #[test]
    fn constant_root_has_zero_gradients() {
        let g = Graph::new();
        let x = g.param(Array::scalar(5.0));
        let c = g.constant(Array::scalar(7.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(x).item(), 0.0);
        assert_eq!(grads.wrt(c).item(), 0.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let g = Graph::new();
        let z = g.param(Array::vector(vec![0.3, -1.2, 2.0]));
        let s = g.softmax_rows(z).unwrap();
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        for v in grads.wrt(z).data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let z = g.param(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // x*x + x through a shared node equals the unshared expression.
        let shared = {
            let g = Graph::new();
            let x = g.param(Array::vector(vec![1.5, -0.5]));
            let sq = g.mul(x, x).unwrap();
            let s = g.add(sq, x).unwrap();
            let root = g.sum(s).unwrap();
            g.backward(root).unwrap().wrt(x).clone()
        };
        let unshared = {
            let g = Graph::new();
            let x = g.param(Array::vector(vec![1.5, -0.5]));
            let a = g.constant(Array::vector(vec![1.5, -0.5]));
            let b = g.constant(Array::vector(vec![1.5, -0.5]));
            let xa = g.mul(x, a).unwrap();
            let xb = g.mul(b, x).unwrap();
            let s = g.add(g.add(xa, xb).unwrap(), x).unwrap();
            let root = g.sum(s).unwrap();
            g.backward(root).unwrap().wrt(x).clone()
        };
        for (a, b) in shared.data().iter().zip(unshared.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(shared.data(), &[4.0, 0.0]);
    }

    #[test]
    fn square_gradient_check() {
        let err = finite_difference_check(
            |g, p| g.sum(g.mul(p[0], p[0])?),
            &[Array::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_gradient_check_is_exact() {
        let err = finite_difference_check(
            |g, _| Ok(g.constant(Array::scalar(4.0))),
            &[Array::vector(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let a = m(&[&[0.3, -0.7, 1.1], &[0.5, 0.2, -0.4]]);
        let b = m(&[&[0.9, -0.1], &[0.4, 0.6], &[-0.8, 0.25]]);
        let row = m(&[&[0.1, -0.2, 0.3]]);
        let err = finite_difference_check(
            |g, p| {
                let prod = g.matmul(p[0], p[1])?; // 2x2
                let wide = g.concat_cols(prod, p[0])?; // 2x5
                let sm = g.softmax_rows(wide)?;
                let lg = g.log(sm)?;
                let picked = g.pick(lg, &[1, 3])?;
                let gathered = g.gather_rows(p[0], &[1, 0, 1])?; // 3x3
                let shifted = g.add_row(gathered, p[2])?;
                let t = g.tanh(shifted)?;
                let e = g.exp(g.scale(t, 0.5)?)?;
                let pooled = g.mean_rows(e)?;
                let diff = g.sub(pooled, p[2])?;
                let sq = g.mul(diff, diff)?;
                let x = g.add(g.sum(picked)?, g.mean(sq)?)?;
                g.add(x, g.sum(g.mul(p[0], p[0])?)?)
            },
            &[a, b, row],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn non_finite_probe_names_the_coordinate() {
        let err = finite_difference_check(
            |g, p| {
                let l = g.log(p[0])?;
                g.sum(l)
            },
            &[Array::vector(vec![1.0, 1e-6])],
            1e-5,
        );
        match err {
            Err(Error::Domain { .. }) | Err(Error::NonFinite { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let err = finite_difference_check(
            |g, p| g.sum(g.exp(g.scale(p[0], 1e300)?)?),
            &[Array::vector(vec![0.0, 0.0])],
            1e-5,
        );
        match err {
            Err(Error::NonFinite {
                location: Some(loc),
                ..
            }) => {
                assert!(loc.contains("coordinate 0"), "{loc}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
