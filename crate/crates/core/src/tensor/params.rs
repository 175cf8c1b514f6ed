use std::collections::HashMap;

use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Gradients;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Registration order is the serialization order and the flattening order
/// used by the optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.requiring_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients a backward pass produced for every bound parameter.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, var) in tape.bound_params() {
            if let Some(g) = grads.get(var) {
                self.tensors[id.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Gradients currently held by the store, as a flat buffer.
    pub fn grads(&self) -> GradBuffer<T> {
        GradBuffer(
            self.tensors
                .iter()
                .map(|t| {
                    t.grad()
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); t.numel()])
                })
                .collect(),
        )
    }

    pub fn zero_grad_buffer(&self) -> GradBuffer<T> {
        GradBuffer(
            self.tensors
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradient vectors aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer<T>(pub Vec<Vec<T>>);

impl<T: Scalar> GradBuffer<T> {
    /// Adds the parameter gradients from one backward pass.
    pub fn add_from(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.bound_params() {
            if let Some(g) = grads.get(var) {
                for (a, &b) in self.0[id.0].iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradBuffer<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        self.0
            .iter_mut()
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x = *x * c);
    }

    pub fn global_norm(&self) -> T {
        self.0
            .iter()
            .flat_map(|v| v.iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }
}
