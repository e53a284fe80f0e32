use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name, t.clone()).expect("names are unique");
        }
        out
    }

    /// Overwrite matching parameters from `other`; every name in `other`
    /// must exist here with the same shape. Returns the number copied.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        for (name, t) in other.iter() {
            let mine = self.get_mut(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name} not present in the target model"))
            })?;
            if mine.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    t.shape(),
                    mine.shape()
                )));
            }
            *mine = t.clone();
        }
        Ok(other.len())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means not reached.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads { grads: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.grads.get(i).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, zeros when unreached.
    pub fn dense(&self, params: &ParamStore, name: &str) -> Option<Tensor> {
        let i = params.index_of(name)?;
        Some(
            self.get(i)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape())),
        )
    }

    pub(crate) fn add(&mut self, i: usize, g: &Tensor) {
        match &mut self.grads[i] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(i, g);
            }
        }
    }

    /// L2 norm over the parameters whose names start with `prefix`.
    pub fn norm_with_prefix(&self, params: &ParamStore, prefix: &str) -> f64 {
        self.grads
            .iter()
            .enumerate()
            .filter(|(i, _)| params.name(*i).starts_with(prefix))
            .filter_map(|(_, g)| g.as_ref())
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
