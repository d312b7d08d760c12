//! Named parameter and buffer storage shared by all layers of a model.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics; never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f64> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        let requires_grad = kind == ParamKind::Trainable;
        self.entries.push(Param { name: name.into(), kind, tensor: tensor.with_requires_grad(requires_grad) });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.tensor.numel()).sum()
    }

    /// Records `id` on the tape.
    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> crate::autodiff::Var {
        tape.param(id, self.get(id))
    }

    /// Adds the gradients of the tape's last backward pass into the stored tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for (id, grad) in tape.param_grads() {
            let entry = self
                .entries
                .get_mut(id.0)
                .ok_or_else(|| Error::Contract(format!("tape refers to unknown parameter {}", id.0)))?;
            entry.tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Same layout in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, tensor: p.tensor.cast() })
                .collect(),
        }
    }
}
