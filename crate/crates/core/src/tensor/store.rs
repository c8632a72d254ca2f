use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters keyed by dotted path, enumerated in lexicographic order.
///
/// Every value mutation bumps [`ParamStore::version`], which caches of
/// derived representations use to detect staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
    version: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(alloc::format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { tensor, trainable });
        self.version += 1;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.version += 1;
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.version += 1;
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Marks exactly the names accepted by `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Copies of the tensors whose names satisfy `pred`.
    pub fn snapshot(&self, pred: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor<T>> {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in snapshot {
            *self.get_mut(name)? = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            version: self.version,
        }
    }

    /// Bitwise equality of values and trainable flags, ignoring the version counter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.trainable == b.trainable && a.tensor.bit_eq(&b.tensor)
            })
    }
}
