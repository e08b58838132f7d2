//! Named parameter storage with a stable iteration order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::TensorData;

/// One named buffer. Non-trainable entries (batch-norm running stats)
/// ride along for checkpointing but never receive optimizer updates.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub data: TensorData,
    pub trainable: bool,
}

/// Insertion-ordered collection of model parameters. The order is the
/// canonical field order of the checkpoint container.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: TensorData, trainable: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            data,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&TensorData> {
        Ok(&self.entries[self.index_of(name)?].data)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorData> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].data)
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Total number of scalar values across trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut s = ParamStore::new();
        s.insert("b", TensorData::zeros(vec![2]), true);
        s.insert("a", TensorData::zeros(vec![3]), false);
        let names: Vec<&str> = s.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(s.index_of("a").unwrap(), 1);
        assert!(s.index_of("c").is_err());
    }
}
