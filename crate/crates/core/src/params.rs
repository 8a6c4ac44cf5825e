//! Named trainable tensors and their gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of parameters. Names are slash-separated paths such as
/// `encoder/obs/attn/q/weight`; the first segment identifies the component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: layer construction is static code.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix)
            .into_iter()
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Copies every tensor whose name exists in `other` with a matching shape.
    /// Returns the names that were not found or had the wrong shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut missing = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            match other.find(name) {
                Some(id) if other.get(id).shape() == self.values[i].shape() => {
                    self.values[i] = other.get(id).clone();
                }
                _ => missing.push(name.to_string()),
            }
        }
        missing
    }
}

/// Gradient slots aligned with a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(len: usize) -> Self {
        Self {
            slots: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, g: Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        crate::math::sqrt(self.slots.iter().flatten().map(|t| t.sum_squares()).sum())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }
}

/// PyTorch-style `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / crate::math::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}
