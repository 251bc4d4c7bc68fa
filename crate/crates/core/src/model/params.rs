use std::ops::Index;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor<T>, decay: bool) -> ParamId {
        value.set_requires_grad(true);
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// First `n` entries as a new store.
    pub fn prefix(&self, n: usize) -> ParamStore<T> {
        ParamStore {
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.entries.iter().map(|e| g.param(&e.value)).collect())
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.entries.iter().map(|e| g.constant(e.value.clone())).collect())
    }

    /// Gradients of every parameter after `g.backward`, in store order.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Result<Vec<Vec<T>>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|(e, &v)| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .ok_or_else(|| Error::Internal(format!("parameter '{}' received no gradient", e.name)))
            })
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn check_mirrors(&self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Internal(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Internal(format!(
                    "parameter mismatch: '{}' {:?} vs '{}' {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
