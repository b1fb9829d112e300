//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Each node holds its forward value,
//! computed when the node is added; [`Graph::backward`] walks the tape in
//! reverse. Parents always precede their children, so construction order is
//! a topological order.

pub mod gradcheck;
mod ops;

pub use ops::OpKind;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    /// Differentiable leaf (input or parameter).
    Input,
    /// Leaf that never receives a gradient (masks, padding, dropout masks).
    Constant,
    Op(OpKind),
}

struct Node<T: Scalar> {
    op: NodeOp,
    parents: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Single writer; distinct graphs are independent.
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`; `None` for nodes the loss
    /// does not depend on through differentiable paths.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, id: NodeId, like: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in creation order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn push(&mut self, op: NodeOp, parents: Vec<NodeId>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(NodeOp::Input, Vec::new(), value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(NodeOp::Constant, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn rank(&self, id: NodeId) -> usize {
        self.shape(id).len()
    }

    pub fn op(&self, id: NodeId) -> &NodeOp {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    /// Adds a node computing `kind` over `inputs`, evaluated immediately.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!("{kind}: unknown node {}", bad.0)));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = ops::forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(NodeOp::Op(kind), inputs.to_vec(), value, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`, keeping the gradient of every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.sweep(loss, true)
    }

    /// Reverse sweep that keeps only leaf gradients (inputs). Interior
    /// gradients are released as soon as they have been propagated.
    pub fn backward_leaves(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.sweep(loss, false)
    }

    fn sweep(&self, loss: NodeId, retain: bool) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            let NodeOp::Op(kind) = &node.op else { continue };
            let g = if retain { grads[k].clone() } else { grads[k].take() };
            let Some(g) = g else { continue };
            let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            if !need.iter().any(|&n| n) {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = ops::backward(kind, &inputs, &node.value, &g, &need)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[p.0] {
                    slot @ None => *slot = Some(pg),
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *v;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn last_axis(&self, x: NodeId) -> Result<usize> {
        self.rank(x)
            .checked_sub(1)
            .ok_or_else(|| shape_err("graph", "operation needs at least one axis"))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Linear, &[x, w, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scalar_mul(b, -1.0)?;
        self.add(a, neg)
    }

    /// `gate * a + (1 - gate) * b`.
    pub fn gate(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Gate, &[gate, a, b])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let axis = self.last_axis(*first)?;
        self.concat(parts, axis)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { axis, start, len }, &[x])
    }

    /// Consecutive slices of `sizes` along `axis`; sizes must cover the axis.
    pub fn split(&mut self, x: NodeId, axis: usize, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let total: usize = sizes.iter().sum();
        if axis >= self.rank(x) || total != self.shape(x)[axis] {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(x)),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Elu, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Softmax { axis }, &[x])
    }

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let axis = self.last_axis(x)?;
        self.softmax(x, axis)
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let axis = self.last_axis(x)?;
        self.apply(OpKind::LogSoftmax { axis }, &[x])
    }

    pub fn sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Sum { axis }, &[x])
    }

    pub fn max(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Max { axis }, &[x])
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::ScalarMul(c), &[x])
    }

    pub fn scalar_add(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::ScalarAdd(c), &[x])
    }

    pub fn transpose(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        self.apply(OpKind::Transpose { a, b }, &[x])
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize], shape: &[usize]) -> Result<NodeId> {
        self.apply(
            OpKind::Embedding {
                ids: ids.to_vec(),
                shape: shape.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn expand(&mut self, x: NodeId, axis: usize, count: usize) -> Result<NodeId> {
        self.apply(OpKind::Expand { axis, count }, &[x])
    }
}
