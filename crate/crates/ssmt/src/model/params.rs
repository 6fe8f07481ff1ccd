//! Named parameter storage with seed-stable initialization, tape binding
//! with per-phase trainability masks, and content fingerprints.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, SsmtError};
use crate::rng::{fnv1a_str, rng_for};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// All model parameters, keyed by a stable hierarchical name. Iteration
/// order is the sorted name order, which makes checkpoints and fingerprints
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.map.insert(name.to_string(), t).is_some() {
            return Err(SsmtError::Contract(format!("parameter '{name}' registered twice")));
        }
        Ok(())
    }

    /// Gaussian init with a stream derived from (seed, name), so adding or
    /// reordering other parameters never changes this one's values.
    pub fn insert_randn(&mut self, name: &str, shape: &[usize], std: f32, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, "init", &[fnv1a_str(name)]);
        let t = Tensor::randn(&mut rng, shape, std);
        self.insert(name, t)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| SsmtError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| SsmtError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    /// SHA-256 of shape and little-endian payload per tensor.
    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        self.map
            .iter()
            .map(|(name, t)| {
                let mut hasher = Sha256::new();
                for &d in t.shape() {
                    hasher.update((d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
                let digest = hasher.finalize();
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                (name.clone(), hex)
            })
            .collect()
    }
}

/// One forward pass's view of the store: parameters become tape leaves on
/// first use, marked trainable only when the phase mask says so.
pub struct Binding<'s> {
    store: &'s ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    bound: BTreeMap<String, Var>,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Binding {
            store,
            trainable: Box::new(trainable),
            bound: BTreeMap::new(),
        }
    }

    pub fn all_trainable(store: &'s ParamStore) -> Self {
        Binding::new(store, |_| true)
    }

    /// Fetch (or create) the tape leaf for a parameter.
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let mut t = self.store.get(name)?.clone();
        t.requires_grad = (self.trainable)(name);
        let v = tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound during this pass, in name order.
    pub fn bound(&self) -> impl Iterator<Item = (&String, Var)> {
        self.bound.iter().map(|(n, &v)| (n, v))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }
}
