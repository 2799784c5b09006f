//! Named parameter storage.
//!
//! Parameters are registered once under hierarchical dot-separated names and
//! addressed afterwards by [`ParamId`]. Iteration order is lexicographic by
//! name, which pins checkpoint layout and optimizer traversal.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to one entry in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

struct Entry<F> {
    name: String,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    trainable: bool,
}

/// Ordered map from hierarchical names to tensors.
pub struct ParameterStore<F> {
    entries: Vec<Entry<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::usage(format!("parameter '{name}' already registered")));
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replace a value in place; the shape must match the registered one.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.value.shape() {
            return Err(Error::dim(format!(
                "parameter '{}': stored shape {:?}, new shape {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Names in lexicographic order (the canonical iteration order).
    pub fn sorted_ids(&self) -> Vec<ParamId> {
        self.by_name.values().map(|&i| ParamId(i)).collect()
    }

    /// Trainable entries in canonical order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.by_name
            .values()
            .filter(|&&i| self.entries[i].trainable)
            .map(|&i| ParamId(i))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Reset every trainable gradient slot to zeros.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if e.trainable {
                e.grad = Some(Tensor::zeros(e.value.shape()));
            }
        }
    }

    /// Drop all gradient slots (the post-optimizer-step state).
    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub(crate) fn accum_grad(&mut self, id: ParamId, g: &Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if !e.trainable {
            return Ok(());
        }
        let slot = e
            .grad
            .get_or_insert_with(|| Tensor::zeros(e.value.shape()));
        if !slot.same_shape(g) {
            return Err(Error::dim(format!(
                "gradient shape {:?} for parameter '{}' of shape {:?}",
                g.shape(),
                e.name,
                e.value.shape()
            )));
        }
        for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    /// Cast every entry into another precision, preserving names, order and
    /// trainability. Gradients do not survive the cast.
    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::new();
        for e in &self.entries {
            out.register(&e.name, e.value.cast::<G>(), e.trainable)
                .expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::<f32>::new();
        s.register("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.register("a.w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParameterStore::<f32>::new();
        s.register("b", Tensor::zeros(&[1]), true).unwrap();
        s.register("a.z", Tensor::zeros(&[1]), true).unwrap();
        s.register("a.b", Tensor::zeros(&[1]), false).unwrap();
        let names: Vec<_> = s.sorted_ids().iter().map(|&i| s.name(i).to_string()).collect();
        assert_eq!(names, ["a.b", "a.z", "b"]);
    }
}
