//! Named parameter storage shared by models, the optimizer, and checkpoints.
//!
//! Every model owns one [`ParamStore`]; layers refer to entries by
//! [`ParamId`]. Ids are assigned in creation order and stay stable for the
//! life of the store, which is what makes optimizer state, checkpoint
//! naming, and freeze hashing line up without bookkeeping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            grad: None,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len() as u64)
            .sum()
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|e| e.value.len() as u64).sum()
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// SHA-256 over name, shape, and raw little-endian bits of every entry
    /// accepted by `filter`, in id order.
    pub fn hash_params(&self, mut filter: impl FnMut(&ParamEntry) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if !filter(e) {
                continue;
            }
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for &dim in e.value.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn hash_all(&self) -> [u8; 32] {
        self.hash_params(|_| true)
    }

    pub fn hash_frozen(&self) -> [u8; 32] {
        self.hash_params(|e| !e.trainable)
    }

    /// Overwrite an entry's tensor, keeping name and trainability; shapes
    /// must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::InvalidConfig(format!(
                "parameter {} expects shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }
}
