use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters of one or more networks, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.params
            .insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Zeroes and allocates the gradient buffer of every trainable tensor.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut().filter(|p| p.trainable) {
            p.tensor.grad_mut();
            p.tensor.zero_grad();
        }
    }

    /// Plain SGD: `W <- W - lr * grad` on every trainable tensor.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (w, gi) in p.tensor.values_mut().iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
        self.step += 1;
    }

    /// Moves every parameter of `other` into `self` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            self.insert(&format!("{prefix}{name}"), p.tensor, p.trainable)?;
        }
        Ok(())
    }
}

/// Equality compares parameters only, not the step counter.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}
