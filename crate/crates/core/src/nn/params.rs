use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{read_entries, write_entries, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors owned by a model: trainable weights plus non-trainable buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    trainable: Vec<bool>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a model construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape), true)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), true)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.add(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn entries(&self) -> Vec<(String, Tensor<S>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_entries(path, &self.entries())
    }

    /// Overwrites values by name from `entries`. Every stored name must be present with a
    /// matching shape; extra entries are returned untouched.
    pub fn assign_from(&mut self, entries: Vec<(String, Tensor<S>)>) -> Result<Vec<(String, Tensor<S>)>> {
        let mut rest = Vec::new();
        let mut filled = vec![false; self.values.len()];
        for (name, t) in entries {
            match self.find(&name) {
                Some(id) => {
                    if self.values[id.0].shape() != t.shape() {
                        return Err(Error::Shape {
                            op: "load parameter",
                            lhs: self.values[id.0].shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    self.values[id.0] = t;
                    filled[id.0] = true;
                }
                None => rest.push((name, t)),
            }
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Config(format!("parameter {} missing from file", self.names[i])));
        }
        Ok(rest)
    }

    /// Copies every parameter whose name starts with `prefix` from `src`; each must exist there
    /// with the same shape. Returns how many were copied.
    pub fn copy_prefix(&mut self, src: &ParamStore<S>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for i in 0..self.values.len() {
            if !self.names[i].starts_with(prefix) {
                continue;
            }
            let id = src
                .find(&self.names[i])
                .ok_or_else(|| Error::Config(format!("parameter {} missing from source", self.names[i])))?;
            let t = src.get(id);
            if t.shape() != self.values[i].shape() {
                return Err(Error::Shape {
                    op: "copy parameter",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.values[i] = t.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let rest = self.assign_from(read_entries(path)?)?;
        if let Some((name, _)) = rest.first() {
            return Err(Error::Config(format!("{}: unexpected parameter {name}", path.display())));
        }
        Ok(())
    }
}
