//! Named parameter storage shared by all networks of an amortizer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors.
///
/// Networks hold [`ParamId`]s into a store owned by their amortizer; each
/// forward pass binds the whole store onto a tape with [`ParamStore::bind`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrites every parameter from a named list; names and shapes must
    /// match exactly, and nothing is modified on mismatch.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let mut incoming = Vec::with_capacity(self.tensors.len());
        for (name, current) in self.names.iter().zip(&self.tensors) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if t.shape() != current.shape() {
                return Err(Error::shape("load_named", current.shape(), t.shape()));
            }
            incoming.push(t.clone());
        }
        self.tensors = incoming;
        Ok(())
    }
}
