//! Named trainable parameters, non-trainable buffers, and the SGD update.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum_buffer: Tensor<T>,
}

/// Owns every parameter and buffer of a model. Names are unique across both.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    names: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        let id = ParamId(self.params.len());
        self.claim(&name, Slot::Param(id.0))?;
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name,
            value,
            grad: Tensor::zeros(shape.clone()),
            momentum_buffer: Tensor::zeros(shape),
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        let id = BufferId(self.buffers.len());
        self.claim(&name, Slot::Buffer(id.0))?;
        self.buffers.push((name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn momentum_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].momentum_buffer
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the gradients of every parameter bound to `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for &(var, id) in tape.bound_params() {
            if let Some(g) = grads.raw(var) {
                let dst = self.params[id.0].grad.data_mut();
                dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`; gradients are zeroed afterwards.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: T, momentum: T, weight_decay: T) {
    for p in &mut store.params {
        let value = p.value.data_mut();
        let v = p.momentum_buffer.data_mut();
        let g = p.grad.data_mut();
        for ((theta, vi), gi) in value.iter_mut().zip(v.iter_mut()).zip(g.iter_mut()) {
            *vi = momentum * *vi + *gi + weight_decay * *theta;
            *theta -= lr * *vi;
            *gi = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(vec![1], value)).unwrap();
        s.params[id.0].grad = Tensor::full(vec![1], grad);
        (s, id)
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![1])).unwrap();
        assert!(s.add("a", Tensor::zeros(vec![1])).is_err());
        assert!(s.add_buffer("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let (mut s, id) = store_with(2.0, 0.5);
        sgd_step(&mut s, 1.0, 0.0, 0.0);
        assert_eq!(s.value(id).data(), &[1.5]);
        assert_eq!(s.grad(id).data(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, id) = store_with(2.0, 0.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0);
        assert_eq!(s.value(id).data(), &[2.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let (mut s, id) = store_with(0.0, 1.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0);
        s.params[id.0].grad = Tensor::full(vec![1], 1.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0);
        // v1 = 1, v2 = 0.9 + 1 = 1.9; Δθ = -0.1·(1 + 1.9)
        assert!((s.value(id).data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let (mut s, id) = store_with(1.0, 0.0);
        sgd_step(&mut s, 0.1, 0.0, 0.5);
        assert!((s.value(id).data()[0] - 0.95).abs() < 1e-15);
    }
}
