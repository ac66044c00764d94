use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics: stored and checkpointed, never
    /// touched by the optimizer.
    RunningStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Every mutable borrow bumps the
/// version, which invalidates tapes recorded against earlier values.
#[derive(Debug)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    id: u64,
    version: u64,
}

impl<T: Clone> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        ParamSet {
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: PartialEq> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

/// Identifies the exact parameter values a tape was recorded against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stamp {
    id: u64,
    version: u64,
}

impl<T: Real> ParamSet<T> {
    pub fn new(params: Vec<Param<T>>) -> Self {
        ParamSet {
            params,
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            id: self.id,
            version: self.version,
        }
    }

    pub fn check_stamp(&self, stamp: Stamp) -> Result<()> {
        if stamp != self.stamp() {
            return Err(Error::StaleTape(
                "tape was recorded against different or since-modified weights".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn as_slice(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Param<T>] {
        self.version += 1;
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get(&self, name: &str) -> &[T] {
        &self.params[self.index_of(name)].data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [T] {
        let i = self.index_of(name);
        self.version += 1;
        &mut self.params[i].data
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .params
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Trainable => vec![T::zero(); p.data.len()],
                    ParamKind::RunningStat => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet::new(
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.f64())).collect(),
                    kind: p.kind,
                })
                .collect(),
        )
    }
}

/// Gradients aligned with a [`ParamSet`]; running statistics get empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn set(&mut self, idx: usize, values: Vec<T>) {
        debug_assert_eq!(self.tensors[idx].len(), values.len());
        self.tensors[idx] = values;
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flat_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}
