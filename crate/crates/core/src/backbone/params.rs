use std::collections::BTreeMap;

use crate::error::{contract_err, Result};
use crate::gradcore::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Frozen entries (e.g. the random Fourier frequencies) are stored and
    /// checkpointed but never updated.
    pub trainable: bool,
}

/// Named parameters in a fixed (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| contract_err!("no parameter named {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| contract_err!("no parameter named {name:?}"))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Same names, trainability and shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.trainable == b.trainable && a.value.shape() == b.value.shape()
            })
    }

    /// Place every parameter on `tape`. Trainable entries become gradient
    /// leaves when the tape records.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Bound<'t>> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.entries {
            vars.insert(name.clone(), tape.leaf(p.value.clone(), p.trainable)?);
        }
        Ok(Bound { vars })
    }
}

/// Parameters placed on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| contract_err!("no parameter named {name:?}"))
    }

    /// Gradient of every trainable parameter (zeros where no gradient arrived).
    pub fn grads(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(name, _)| store.is_trainable(name))
            .map(|(name, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
