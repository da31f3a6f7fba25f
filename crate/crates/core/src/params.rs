//! Named parameter sets, gradients aligned to them, and immutable snapshots.

use dapass_tensor::{Element, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.push(Param {
            name: name.into(),
            value,
        });
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().map(|p| &p.value)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fails on the first parameter whose name or shape differs from `other`.
    pub fn check_compatible<U: Element>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParamSet(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(other.iter()) {
            if mine.name != theirs.name {
                return Err(Error::ParamSet(format!(
                    "expected tensor `{}`, found `{}`",
                    mine.name, theirs.name
                )));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(Error::ParamShape {
                    name: mine.name.clone(),
                    expected: mine.value.shape().to_vec(),
                    found: theirs.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// `self -= step * grads`, coordinate-wise.
    pub fn sgd_update(&mut self, grads: &Grads<T>, step: T) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v = *v - step * d;
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradients aligned index-by-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Tensor<T>>);

impl<T: Element> Grads<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self(params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Immutable copy of all model parameters at one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot<T> {
    pub tag: String,
    pub iteration: u64,
    pub params: ParamStore<T>,
}
