//! Named trainable tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut RngStream) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| bound * (2.0 * rng.uniform() - 1.0));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn lens(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::len).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.param(id, &self.tensors[id.0])
    }

    /// Replaces every tensor, requiring identical names and shapes.
    pub fn load_from(&mut self, other: ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Corrupt("parameter names do not match the model layout".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Corrupt(format!("parameter shape {:?} vs {:?}", b.shape(), a.shape())));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}
