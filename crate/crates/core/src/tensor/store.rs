//! Named parameter storage with group-level learning-rate/freeze control.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Element, TensorData};

/// Which part of the network a parameter belongs to. Groups drive the
/// optimizer's per-group learning rates and the freeze flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Image-encoder backbone (frozen when a pretrained backend is used).
    Backbone,
    /// Prompt role embeddings.
    Prompt,
    /// Two-way transformer, output tokens, coarse heads.
    Decoder,
    /// Feature projection, refinement blocks, output heads, quality head.
    Refine,
    /// Non-trainable state (e.g. the prompt frequency matrix).
    Buffer,
}

pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: TensorData<T>,
}

/// Flat, insertion-ordered parameter table. Registration order is the
/// canonical parameter order everywhere (gradients, optimizer state,
/// checkpoints), which keeps runs reproducible.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: TensorData<T>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group,
            trainable: group != ParamGroup::Buffer,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: usize) -> &TensorData<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut TensorData<T> {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn trainable(&self, id: usize) -> bool {
        self.entries[id].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ParamEntry<T>)> {
        self.entries.iter().enumerate()
    }

    /// Freeze or unfreeze every parameter in a group. Buffers stay frozen.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in &mut self.entries {
            if e.group == group && group != ParamGroup::Buffer {
                e.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).count()
    }

    /// Order-insensitive digest of a group's values, for freeze contracts.
    pub fn group_checksum(&self, group: ParamGroup) -> f64 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            if e.group == group {
                for (i, v) in e.value.data().iter().enumerate() {
                    acc += v.to_f64() * ((i % 97) as f64 + 1.0);
                }
            }
        }
        acc
    }
}
