//! Named parameter storage shared by every network in a model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<R> {
    pub name: String,
    pub value: Tensor<R>,
    /// Frozen entries (permutations, signs) are persisted but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    entries: Vec<ParamEntry<R>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::config(format!(
                "parameter {} expects shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<R> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Adds `N(0, scale²)` noise to every trainable entry whose name passes
    /// `filter`. Used to move zero-initialized layers off their fixed point
    /// when probing Jacobians and gradients.
    pub fn perturb(&mut self, scale: f64, rng: &mut impl Rng, filter: impl Fn(&str) -> bool) {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for e in self.entries.iter_mut().filter(|e| e.trainable && filter(&e.name)) {
            for v in e.value.data_mut() {
                *v += R::lit(normal.sample(rng));
            }
        }
    }
}

/// Per-parameter gradient accumulator indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> ParamGrads<R> {
    pub fn new(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<R>) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Gradient for `id`; parameters that never reached the loss read as zero.
    pub fn get_or_zero(&self, id: ParamId, store: &ParamStore<R>) -> Tensor<R> {
        self.grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
