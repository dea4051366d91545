//! Named tensor collections and their binding onto a tape.

use std::collections::BTreeMap;

use apa_numerics::{Tape, Tensor, Var};

use crate::error::{contract, Result};

/// Name-ordered tensor map. Iteration order is the byte order of the names,
/// which fixes the blob order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| contract(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors.get_mut(name).ok_or_else(|| contract(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Shapes must match name-for-name.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Tape handles for a set of parameters.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every tensor of `stores` on `tape`; names accepted by
    /// `trainable` become differentiable leaves.
    pub fn new(tape: &mut Tape<f32>, stores: &[&ParamStore], trainable: &dyn Fn(&str) -> bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for store in stores {
            for (name, value) in store.iter() {
                let var = if trainable(name) { tape.param(value.clone()) } else { tape.constant(value.clone()) };
                if vars.insert(name.to_string(), var).is_some() {
                    return Err(contract(format!("parameter '{name}' bound twice")));
                }
            }
        }
        Ok(Self { vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| contract(format!("missing parameter '{name}'")))
    }

    /// Rebinds `name` to another variable, e.g. a leaf owned by a gradient check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(contract(format!("missing parameter '{name}'"))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
