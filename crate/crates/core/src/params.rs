//! Named learnable tensors and their per-pass binding onto a tape.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Adds a tensor drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{}` is {:?}, got {:?}", self.names[id.0], slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Names alongside mutable values, for optimizer steps.
    pub fn split_mut(&mut self) -> (&[String], &mut [Tensor]) {
        (&self.names, &mut self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// Tape handles for one forward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss never touched get zeros.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, value)| grads.get_or_zeros(v, value))
            .collect()
    }
}
