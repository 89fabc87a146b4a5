//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use super::{Arr, Tape, Var};

/// Stable handle to a parameter slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    /// Trainable weights get gradients; buffers (running statistics) do not.
    pub trainable: bool,
}

/// Flat registry of parameters in registration order. Registration order is
/// deterministic for a given model config, which keeps checkpoints and the
/// optimizer state aligned.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> PId {
        self.insert(name, value, true)
    }

    pub fn register_buffer(&mut self, name: &str, value: Arr) -> PId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Arr, trainable: bool) -> PId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        PId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: PId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Arr {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: PId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<PId> {
        self.by_name.get(name).copied().map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (PId(i), e))
    }

    pub fn set_trainable(&mut self, id: PId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Number of trainable scalar coordinates.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Put every parameter on a tape; returns the Var handles aligned with
    /// parameter indices.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.input(e.value.clone()))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one binding of a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }
}

/// Deferred buffer writes (batch-norm running statistics) produced during a
/// training-mode forward pass; the caller applies them after the step.
#[derive(Default)]
pub struct BufferUpdates {
    pub updates: Vec<(PId, Arr)>,
}

impl BufferUpdates {
    pub fn push(&mut self, id: PId, value: Arr) {
        self.updates.push((id, value));
    }

    pub fn apply(self, params: &mut ParamStore) {
        for (id, value) in self.updates {
            *params.value_mut(id) = value;
        }
    }
}
