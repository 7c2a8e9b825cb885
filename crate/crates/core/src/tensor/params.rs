use std::collections::BTreeMap;

use super::{Gradients, Real, Result, Tape, Tensor, TensorError, Var};

/// Named trainable tensors. Iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Parameter names mapped to their leaves on one tape.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    /// Inserts a trainable parameter, replacing any previous one of the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.params.insert(name.into(), tensor.trainable());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self.params.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        BoundParams { vars }
    }

    /// Moves gradients from a backward pass into the parameters' grad buffers,
    /// adding to any gradient already present.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &mut Gradients<T>) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let Some(&var) = bound.vars.get(name) else { continue };
            let Some(g) = grads.take(var) else { continue };
            match t.grad_mut() {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g) {
                        *e += v;
                    }
                }
                None => t.set_grad(g)?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
