use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Scalar, Tensor};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params<F> {
        Params {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every tensor of `other` into `self`, replacing same-named entries.
    pub fn extend_from(&mut self, other: &Params<F>) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Glorot-uniform matrix.
    pub fn init_linear<R: Rng>(&mut self, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..fan_in * fan_out)
            .map(|_| F::from_f64_lossy(dist.sample(rng)))
            .collect();
        self.insert(name, Tensor::from_parts(vec![fan_in, fan_out], data));
    }

    pub fn init_normal<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| F::from_f64_lossy(dist.sample(rng)))
            .collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, F::from_f64_lossy(value)));
    }
}
