use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::seed::Rng;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not learned (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of a network's tensors. Order is creation
/// order and is the order used by checkpoints and digests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
            data: data.into_iter().map(T::of).collect(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    kind: e.kind,
                    data: e.data.iter().map(|&x| U::of(x.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            bail!(
                Shape,
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            );
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                bail!(
                    Shape,
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.shape,
                    b.name,
                    b.shape
                );
            }
            a.data.clone_from(&b.data);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the
    /// selected entries.
    pub fn digest(&self, include_buffers: bool) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            if e.kind == ParamKind::Buffer && !include_buffers {
                continue;
            }
            h.update(e.name.as_bytes());
            for &d in &e.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &x in &e.data {
                h.update(x.f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient buffers aligned with a [`ParamSet`]; buffers get empty vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(ps: &ParamSet<T>) -> Self {
        Self {
            bufs: ps
                .entries()
                .iter()
                .map(|e| match e.kind {
                    ParamKind::Trainable => vec![T::zero(); e.data.len()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        for (a, &b) in self.bufs[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|x| x.is_finite())
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.bufs
    }
}

/// He-normal initial weights: `N(0, gain² / fan_in)`.
pub(crate) fn he_normal(rng: &mut Rng, len: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}
