//! Named parameter storage shared by layers, the optimizer, and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Index of a parameter within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// All trainable tensors of a model, addressed by stable indices.
///
/// Registration order is part of a model's identity: it fixes the layout of
/// optimizer state and the iteration order of every gradient pass, which keeps
/// training bitwise reproducible for a given seed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Register every parameter as a leaf of `tape`, in index order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone()))
            .collect();
        Bound { vars }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Replace all tensors with the ones in `other`, matching by name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch: expected {}, found {}",
                    mine.name, theirs.name
                )));
            }
            if mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// The tape vars of one [`ParamStore::bind`] call, aligned with param indices.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter after a backward pass, zeros where none flowed.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let shape = store.entries[i].tensor.shape().to_vec();
                match tape.grad(v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape matches"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}
