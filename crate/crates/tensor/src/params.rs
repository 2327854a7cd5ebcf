use std::collections::HashMap;
use std::sync::Arc;

use crate::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Trainable,
    /// State updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Arc<Tensor<T>>,
}

/// Flat storage of named model arrays. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Parameter handles of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value: Arc::new(value) });
        Ok(id)
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

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.by_name.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        self.entries[id.0].value.expect_same_shape(&value)?;
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    pub fn num_scalars(&self, kind: ParamKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.value.len()).sum()
    }

    /// Same names and layout in another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: Arc::new(e.value.cast()) })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
