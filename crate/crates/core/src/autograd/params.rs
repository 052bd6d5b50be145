use super::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StoreId(u64);

fn fresh_id() -> StoreId {
    StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
}

/// Named, ordered collection of parameter tensors.
///
/// Cloning yields a store with a new identity so two copies can be bound on
/// the same tape without aliasing.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: StoreId,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Elementwise equality of names, shapes and values.
    pub fn same_values(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x == y))
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            id: fresh_id(),
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap()))
                .collect(),
        }
    }
}
