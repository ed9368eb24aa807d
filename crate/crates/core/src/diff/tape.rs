//! Define-by-run recording of primitive ops with reverse-mode gradients.

use std::sync::Arc;

use crate::diff::ops::{self, OpKind};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Option<OpKind>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Linear record of evaluated ops. Nodes only reference earlier nodes, so the
/// recording order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    /// Leaf sharing storage with the caller, without copying.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad)
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: None, inputs: Vec::new(), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
        let value = Arc::new(ops::forward(&op, &values)?);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: Some(op), inputs: inputs.iter().map(|v| v.0).collect(), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &*self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &*self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &grad, &needs);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatLast, xs)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Elu, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Abs, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::SquaredError, &[a, b])
    }

    pub fn masked_cross_entropy(&mut self, logits: Var, mask: Vec<bool>, label: usize) -> Result<Var> {
        self.apply(OpKind::MaskedCrossEntropy { mask, label }, &[logits])
    }

    pub fn select_rows(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::SelectRows(rows), &[table])
    }

    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Gather(idx), &[x])
    }
}
