//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node holding the output value and the rule needed to push an
//! upstream gradient back to the node's inputs. Because nodes are only ever
//! appended, the tape is always in topological order and a single reverse
//! sweep visits each node once.
//!
//! Parameters are copied onto the tape with [`Tape::param`]; after
//! [`Tape::backward`] their gradients are read back with
//! [`Tape::param_grads`] and accumulated into the owning
//! [`crate::ParamStore`].

mod conv;
mod gradcheck;
mod norm;
mod ops;

use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, GradCheckOptions};
pub use norm::{BatchNormMode, BatchStats};
pub use ops::ReduceKind;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values, the output
/// value and the upstream gradient; returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Scale(Var, T),
    Linear { x: Var, weight: Var, bias: Option<Var> },
    SliceChannels { x: Var, count: usize },
    Reduce { x: Var, kind: ReduceKind, axis: Option<usize> },
    MeanOf(Vec<Var>),
    Reshape(Var),
    BatchNorm(norm::BatchNormNode<T>),
    Conv2d(conv::ConvNode),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Custom { inputs: Vec<Var>, backward: BackwardFn<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(Var, ParamId)>,
    overrides: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), overrides: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut value = tensor;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Snapshots a parameter onto the tape and remembers which store slot it came from.
    ///
    /// If [`Tape::bind_param`] registered a value for `id`, that value is used instead.
    pub fn param(&mut self, id: ParamId, tensor: &Tensor<T>) -> Var {
        if let Some(&(_, var)) = self.overrides.iter().find(|(p, _)| *p == id) {
            return var;
        }
        let mut value = tensor.clone();
        let requires_grad = value.requires_grad();
        value.zero_grad();
        let var = self.push(value, Op::Leaf, requires_grad);
        self.params.push((var, id));
        var
    }

    /// Makes later [`Tape::param`] calls for `id` resolve to `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.overrides.retain(|(p, _)| *p != id);
        self.overrides.push((id, var));
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `var`, if it was reached.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// `(store slot, gradient)` for every parameter reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params.iter().filter_map(move |&(var, id)| self.grad(var).map(|g| (id, g)))
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records a user-defined operation with an explicit backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = self.any_grad(inputs);
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, requires_grad)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, &[T::one()])
    }

    /// Reverse sweep from an arbitrary node with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, root: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape("backward", self.shape(root), &[seed.len()]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(seed.to_vec());
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dout) = self.grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &dout);
            self.grads[idx] = Some(dout);
            for (var, delta) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert!(var.0 < idx, "tape order violated");
                match &mut self.grads[var.0] {
                    Some(g) => g.iter_mut().zip(&delta).for_each(|(g, &d)| *g = *g + d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, dout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                backward(&values, &node.value, dout)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(g, &v)| g.map(|g| (v, g)))
                    .collect()
            }
            Op::BatchNorm(bn) => norm::backward(self, bn, dout),
            Op::Conv2d(c) => conv::conv_backward(self, c, dout),
            Op::MaxPool2d { x, argmax } => conv::max_pool_backward(self, *x, argmax, dout),
            Op::GlobalAvgPool(x) => conv::global_avg_pool_backward(self, *x, dout),
            op => ops::backward(self, op, &node.value, dout),
        }
    }
}
