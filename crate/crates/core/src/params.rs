use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable parameter together with its gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters, iterated in name order so every traversal is
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Copies of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every parameter of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::usage(format!("duplicate parameter `{k}`")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.same_shape(&b.value))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("gradient for unknown parameter `{name}`")))?;
        if p.grad.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.grad.len()
            )));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    /// Flattened parameter values in name order; handy for hashing and
    /// finite-difference checks.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}
