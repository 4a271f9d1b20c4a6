//! Named parameter storage with paired gradient buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Parameters kept sorted by name, so iteration order is lexicographic and
/// reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        match self.entries.binary_search_by(|e| e.name.as_str().cmp(&name)) {
            Ok(_) => Err(Error::Config(format!("duplicate parameter `{name}`"))),
            Err(pos) => {
                let grad = Tensor::zeros(value.shape());
                self.entries.insert(pos, ParamEntry { name, value, grad });
                Ok(())
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.name.as_str().cmp(name)).ok()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index_of(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.entries[i].grad)
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<F> {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds the parameter gradients recorded by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (idx, g) in grads.param_grads() {
            let dst = self.entries[idx].grad.data_mut();
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    /// Same names and shapes, converted element type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Normal samples with standard deviation `std`, redrawn outside `±2·std`.
pub fn trunc_normal<F: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::of(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
