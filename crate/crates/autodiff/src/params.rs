use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters still take part in the forward pass but never
    /// receive gradients or optimizer updates.
    pub trainable: bool,
}

/// Named, ordered collection of model parameters and their accumulated
/// gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    /// Returns how many parameters matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy values of every same-named, same-shaped parameter from `other`.
    /// Returns the number of parameters copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.get(id);
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Scale every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Add the gradients accumulated in `other` (same layout) into `self`.
    pub fn accumulate_grads_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(TensorError::Contract("parameter stores differ in layout".into()));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (g, h) in p.grad.iter_mut().zip(&q.grad) {
                *g += h;
            }
        }
        Ok(())
    }
}
