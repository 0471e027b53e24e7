//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only list of nodes. Leaves hold parameters or
//! constants; every other node records one operation from the fixed
//! [`OpKind`] catalog together with its forward value. Because inputs must
//! already exist when a node is appended, node ids are topologically
//! ordered and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use contproto::math::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let loss = tape.dot(x, x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
//! ```

use crate::error::{Error, Result};
use crate::math::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Stack vertically (row counts add up).
    Rows,
    /// Stack horizontally (column counts add up).
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// The fixed operation catalog. Non-tensor arguments live in the variant;
/// tensor arguments are passed as node ids to [`Tape::forward`].
#[derive(Clone, Debug)]
pub enum OpKind<S: Scalar> {
    /// `a·b` (inputs `[a, b]`), or `a·bᵀ` when `transpose_rhs` is set.
    MatMul {
        transpose_rhs: bool,
    },
    /// Elementwise sum. The second input may also be a `1×c` row
    /// (broadcast over rows) or a `1×1` scalar (broadcast everywhere).
    Add,
    /// Multiplication by a constant.
    Scale(S),
    Concat(Axis),
    /// Gathers rows of the single input; indices may repeat.
    RowSelect(Vec<usize>),
    Exp,
    /// `ln(max(x, floor))`; the gradient is zero where the floor binds.
    Log {
        floor: S,
    },
    SoftmaxRows,
    L2NormalizeRows,
    /// Frobenius inner product `Σ a⊙b`, producing a `1×1` scalar.
    Dot,
    /// Elementwise product with a constant mask (dropout, selection masks).
    MaskApply(Tensor<S>),
    Activation(Activation),
}

impl<S: Scalar> OpKind<S> {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Concat(_) => "concat",
            OpKind::RowSelect(_) => "row_select",
            OpKind::Exp => "exp",
            OpKind::Log { .. } => "log",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::Dot => "dot",
            OpKind::MaskApply(_) => "mask_apply",
            OpKind::Activation(Activation::Tanh) => "tanh",
            OpKind::Activation(Activation::Relu) => "relu",
        }
    }
}

#[derive(Debug)]
enum Record<S: Scalar> {
    Leaf,
    Op { kind: OpKind<S>, inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    record: Record<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `node`, or `None` if the loss does not
    /// depend on it through any differentiable path.
    pub fn get(&self, node: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached nodes.
    pub fn get_or_zeros(&self, node: NodeId, like: &Tensor<S>) -> Tensor<S> {
        self.get(node).cloned().unwrap_or_else(|| {
            Tensor::new(like.shape().to_vec(), vec![S::zero(); like.len()]).expect("shape copied from a valid tensor")
        })
    }
}

fn dims<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    t.dims()
        .map_err(|_| Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
}

/// Logical `(rows, cols, row_stride, col_stride)` of a matrix, optionally
/// viewed transposed.
fn view<S: Scalar>(t: &Tensor<S>, transpose: bool) -> (usize, usize, isize, isize) {
    let (r, c) = (t.rows(), t.cols());
    if transpose {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

/// `op(a)·op(b)` as a fresh tensor.
pub(crate) fn gemm<S: Scalar>(a: &Tensor<S>, ta: bool, b: &Tensor<S>, tb: bool) -> Tensor<S> {
    let (m, k, ars, acs) = view(a, ta);
    let (k2, n, brs, bcs) = view(b, tb);
    debug_assert_eq!(k, k2);
    let mut out = Tensor::zeros(m, n);
    S::gemm(
        m,
        k,
        n,
        S::one(),
        (a.data(), ars, acs),
        (b.data(), brs, bcs),
        S::zero(),
        (out.data_mut(), n as isize, 1),
    );
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Record::Leaf, value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Record::Leaf, value, false)
    }

    pub fn value(&self, node: NodeId) -> &Tensor<S> {
        &self.nodes[node.0].value
    }

    fn push(&mut self, record: Record<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            record,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends one operation and evaluates it.
    pub fn forward(&mut self, kind: OpKind<S>, inputs: &[NodeId]) -> Result<NodeId> {
        let name = kind.name();
        let arity = match &kind {
            OpKind::MatMul { .. } | OpKind::Add | OpKind::Dot => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::shape(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(name, "expected at least one input"));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::shape(name, format!("unknown node {}", bad.0)));
        }
        let value = self.eval(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(
            Record::Op {
                kind,
                inputs: inputs.to_vec(),
            },
            value,
            requires_grad,
        ))
    }

    fn eval(&self, kind: &OpKind<S>, inputs: &[NodeId]) -> Result<Tensor<S>> {
        let name = kind.name();
        let x = self.value(inputs[0]);
        match kind {
            OpKind::MatMul { transpose_rhs } => {
                let y = self.value(inputs[1]);
                let (_, k) = dims(name, x)?;
                dims(name, y)?;
                let (k2, _, _, _) = view(y, *transpose_rhs);
                if k != k2 {
                    return Err(Error::shape(
                        name,
                        format!(
                            "{:?} x {:?}{}",
                            x.shape(),
                            y.shape(),
                            if *transpose_rhs { "ᵀ" } else { "" }
                        ),
                    ));
                }
                Ok(gemm(x, false, y, *transpose_rhs))
            }
            OpKind::Add => {
                let y = self.value(inputs[1]);
                let (r, c) = dims(name, x)?;
                let (yr, yc) = dims(name, y)?;
                let mut out = x.clone();
                if (yr, yc) == (r, c) {
                    out.add_assign(y);
                } else if (yr, yc) == (1, c) {
                    for i in 0..r {
                        for (o, &b) in out.row_mut(i).iter_mut().zip(y.data()) {
                            *o += b;
                        }
                    }
                } else if (yr, yc) == (1, 1) {
                    let b = y.data()[0];
                    out.data_mut().iter_mut().for_each(|o| *o += b);
                } else {
                    return Err(Error::shape(name, format!("{:?} + {:?}", x.shape(), y.shape())));
                }
                Ok(out)
            }
            OpKind::Scale(f) => Ok(x.map(|v| v * *f)),
            OpKind::Concat(axis) => {
                let parts: Vec<&Tensor<S>> = inputs.iter().map(|&i| self.value(i)).collect();
                concat(name, &parts, *axis)
            }
            OpKind::RowSelect(idx) => {
                let (r, c) = dims(name, x)?;
                if let Some(bad) = idx.iter().find(|&&i| i >= r) {
                    return Err(Error::shape(name, format!("row {bad} of {:?}", x.shape())));
                }
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(x.row(i));
                }
                Tensor::matrix(idx.len(), c, data)
            }
            OpKind::Exp => Ok(x.map(S::exp)),
            OpKind::Log { floor } => Ok(x.map(|v| v.max(*floor).ln())),
            OpKind::SoftmaxRows => {
                let (r, _) = dims(name, x)?;
                let mut out = x.clone();
                for i in 0..r {
                    softmax_in_place(out.row_mut(i));
                }
                Ok(out)
            }
            OpKind::L2NormalizeRows => {
                let (r, _) = dims(name, x)?;
                let mut out = x.clone();
                for i in 0..r {
                    let row = out.row_mut(i);
                    let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                    if norm > S::zero() {
                        row.iter_mut().for_each(|v| *v /= norm);
                    }
                }
                Ok(out)
            }
            OpKind::Dot => {
                let y = self.value(inputs[1]);
                if x.shape() != y.shape() {
                    return Err(Error::shape(name, format!("{:?} · {:?}", x.shape(), y.shape())));
                }
                let s = x.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                Ok(Tensor::scalar(s))
            }
            OpKind::MaskApply(mask) => {
                if mask.shape() != x.shape() {
                    return Err(Error::shape(
                        name,
                        format!("mask {:?} on {:?}", mask.shape(), x.shape()),
                    ));
                }
                let mut out = x.clone();
                for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
                    *o *= m;
                }
                Ok(out)
            }
            OpKind::Activation(Activation::Tanh) => Ok(x.map(S::tanh)),
            OpKind::Activation(Activation::Relu) => Ok(x.map(|v| v.max(S::zero()))),
        }
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(out.shape().to_vec(), vec![S::one()])?);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Record::Op { kind, inputs } = &node.record else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contributions = self.local_grads(kind, inputs, &node.value, &g);
            grads[id] = Some(g);
            for (input, contrib) in inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node w.r.t. each of its inputs.
    fn local_grads(
        &self,
        kind: &OpKind<S>,
        inputs: &[NodeId],
        out: &Tensor<S>,
        g: &Tensor<S>,
    ) -> Vec<Option<Tensor<S>>> {
        let needs = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let x = self.value(inputs[0]);
        match kind {
            OpKind::MatMul { transpose_rhs } => {
                let y = self.value(inputs[1]);
                let dx = needs(0).then(|| gemm(g, false, y, !*transpose_rhs));
                let dy = needs(1).then(|| {
                    if *transpose_rhs {
                        gemm(g, true, x, false)
                    } else {
                        gemm(x, true, g, false)
                    }
                });
                vec![dx, dy]
            }
            OpKind::Add => {
                let y = self.value(inputs[1]);
                let dy = needs(1).then(|| {
                    if y.shape() == g.shape() {
                        g.clone()
                    } else if y.len() == 1 {
                        Tensor::scalar(g.data().iter().copied().sum())
                    } else {
                        let mut acc = vec![S::zero(); y.len()];
                        for i in 0..g.rows() {
                            for (a, &v) in acc.iter_mut().zip(g.row(i)) {
                                *a += v;
                            }
                        }
                        Tensor::row_vector(acc)
                    }
                });
                vec![needs(0).then(|| g.clone()), dy]
            }
            OpKind::Scale(f) => vec![Some(g.map(|v| v * *f))],
            OpKind::Concat(axis) => {
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        let part = self.value(id);
                        let piece = match axis {
                            Axis::Rows => {
                                let n = part.rows();
                                let c = g.cols();
                                let data = g.data()[offset * c..(offset + n) * c].to_vec();
                                offset += n;
                                Tensor::matrix(n, c, data)
                            }
                            Axis::Cols => {
                                let n = part.cols();
                                let mut data = Vec::with_capacity(g.rows() * n);
                                for r in 0..g.rows() {
                                    data.extend_from_slice(&g.row(r)[offset..offset + n]);
                                }
                                offset += n;
                                Tensor::matrix(g.rows(), n, data)
                            }
                        };
                        needs(i).then(|| piece.expect("slice of the output gradient"))
                    })
                    .collect()
            }
            OpKind::RowSelect(idx) => {
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
            OpKind::Log { floor } => vec![Some(zip_map(
                g,
                x,
                |gv, xv| {
                    if xv > *floor {
                        gv / xv
                    } else {
                        S::zero()
                    }
                },
            ))],
            OpKind::SoftmaxRows => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let inner: S = g.row(i).iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = yv * (*d - inner);
                    }
                }
                vec![Some(dx)]
            }
            OpKind::L2NormalizeRows => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let norm = x.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
                    let row = dx.row_mut(i);
                    if norm <= S::zero() {
                        row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let y = out.row(i);
                    let inner: S = g.row(i).iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in row.iter_mut().zip(y) {
                        *d = (*d - yv * inner) / norm;
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Dot => {
                let y = self.value(inputs[1]);
                let s = g.data()[0];
                vec![needs(0).then(|| y.map(|v| v * s)), needs(1).then(|| x.map(|v| v * s))]
            }
            OpKind::MaskApply(mask) => vec![Some(zip_map(g, mask, |gv, m| gv * m))],
            OpKind::Activation(Activation::Tanh) => {
                vec![Some(zip_map(g, out, |gv, y| gv * (S::one() - y * y)))]
            }
            OpKind::Activation(Activation::Relu) => {
                vec![Some(zip_map(
                    g,
                    x,
                    |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    },
                ))]
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a·bᵀ`: pairwise row inner products, also the linear-layer form
    /// `x·Wᵀ` for weights stored `out×in`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> Result<NodeId> {
        self.forward(OpKind::Scale(factor), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        self.forward(OpKind::Concat(axis), parts)
    }

    pub fn row_select(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.forward(OpKind::RowSelect(rows), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId, floor: S) -> Result<NodeId> {
        self.forward(OpKind::Log { floor }, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::SoftmaxRows, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::L2NormalizeRows, &[a])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Dot, &[a, b])
    }

    pub fn mask_apply(&mut self, a: NodeId, mask: Tensor<S>) -> Result<NodeId> {
        self.forward(OpKind::MaskApply(mask), &[a])
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        self.forward(OpKind::Activation(kind), &[a])
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

fn concat<S: Scalar>(name: &'static str, parts: &[&Tensor<S>], axis: Axis) -> Result<Tensor<S>> {
    let shapes: Vec<(usize, usize)> = parts.iter().map(|t| dims(name, t)).collect::<Result<_>>()?;
    match axis {
        Axis::Rows => {
            let c = shapes[0].1;
            if shapes.iter().any(|s| s.1 != c) {
                return Err(Error::shape(name, format!("row concat of {shapes:?}")));
            }
            let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::matrix(shapes.iter().map(|s| s.0).sum(), c, data)
        }
        Axis::Cols => {
            let r = shapes[0].0;
            if shapes.iter().any(|s| s.0 != r) {
                return Err(Error::shape(name, format!("column concat of {shapes:?}")));
            }
            let total: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in parts {
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::matrix(r, total, data)
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 2, &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_shape_rule() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 1));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 1));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(
            msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 1]"),
            "{msg}"
        );
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(1, 2, &[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);
        let w = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.dot(y, w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = tape.dot(x, x).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn log_softmax_gradient_closed_form() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let target = 2;
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(1, 4, &z));
        let p = tape.softmax_rows(x).unwrap();
        let lp = tape.log(p, 1e-300).unwrap();
        let mut sel = vec![0.0; 4];
        sel[target] = 1.0;
        let sel = tape.constant(t(1, 4, &sel));
        let loss = tape.dot(lp, sel).unwrap();
        let g = tape.backward(loss).unwrap();
        let p = tape.value(p).data().to_vec();
        for (c, gv) in g.get(x).unwrap().data().iter().enumerate() {
            let onehot = if c == target { 1.0 } else { 0.0 };
            // d/dz log softmax(z)[t] = onehot - softmax(z)
            assert!((gv - (onehot - p[c])).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = sum(tanh(x) ⊙ tanh(x)) built once with a shared node and once
        // with a duplicated subgraph; gradients must agree.
        let x0 = t(2, 2, &[0.1, -0.4, 0.7, 0.2]);
        let mut shared = Tape::<f64>::new();
        let x = shared.param(x0.clone());
        let h = shared.activation(x, Activation::Tanh).unwrap();
        let l = shared.dot(h, h).unwrap();
        let g_shared = shared.backward(l).unwrap().get(x).unwrap().clone();

        let mut dup = Tape::<f64>::new();
        let x = dup.param(x0);
        let h1 = dup.activation(x, Activation::Tanh).unwrap();
        let h2 = dup.activation(x, Activation::Tanh).unwrap();
        let l = dup.dot(h1, h2).unwrap();
        let g_dup = dup.backward(l).unwrap().get(x).unwrap().clone();
        for (a, b) in g_shared.data().iter().zip(g_dup.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.param(Tensor::scalar(5.0));
        let l = tape.dot(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().item(), Some(2.0));
    }

    #[test]
    fn add_broadcasts_rows_and_scalars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(1, 2, &[10.0, 20.0]));
        let s = tape.param(Tensor::scalar(0.5));
        let y = tape.add(x, b).unwrap();
        let y = tape.add(y, s).unwrap();
        assert_eq!(tape.value(y).data(), &[11.5, 22.5, 13.5, 24.5]);
        let w = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let l = tape.dot(y, w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.get(s).unwrap().item(), Some(10.0));
        let bad = tape.constant(Tensor::zeros(3, 1));
        assert!(tape.add(x, bad).is_err());
    }
}
