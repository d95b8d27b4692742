//! Named parameter storage shared by the model components.

use crate::autograd::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn new(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named, learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a trainable tensor, or replaces the tensor already
    /// registered under `name` (keeping its id).
    pub fn add_or_replace(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        match self.find(&name) {
            Some(id) => {
                self.tensors[id.0] = tensor.with_grad(true);
                id
            }
            None => self.add(name, tensor),
        }
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalars in parameters whose name starts with one of `prefixes`.
    pub fn scalar_count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.iter()
            .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if n.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies gradients of every parameter bound on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.bound_params() {
            let t = &mut self.tensors[id.0];
            if t.requires_grad {
                if let Some(g) = grads.get(var) {
                    t.accumulate_grad(g);
                }
            }
        }
    }

    /// Same layout in another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces the values of `id`, keeping the registered shape.
    pub fn set_values(&mut self, id: ParamId, values: &[T]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != values.len() {
            return Err(Error::shape("set_values", t.shape(), &[values.len()]));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }
}

pub(crate) mod init {
    use rand::Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    use crate::tensor::Tensor;

    /// Entries drawn from U(-bound, bound).
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<f32> {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
    }

    /// Linear-layer style init with bound `1 / sqrt(fan_in)`.
    pub fn fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
        uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
    }
}
