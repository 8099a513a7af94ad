use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Named parameter tensors together with their Adam moment buffers.
///
/// One store is one optimizer instance: it owns a single step counter.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    /// Registers a parameter and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        value.clear_grad();
        let n = value.len();
        let id = self.params.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.params[id].name
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Moment buffers `(m, v)` of a parameter.
    pub fn moments(&self, id: usize) -> (&[T], &[T]) {
        (&self.params[id].m, &self.params[id].v)
    }

    /// Replaces a parameter's values, keeping its optimizer state.
    pub fn assign(&mut self, id: usize, data: &[T]) -> Result<()> {
        let p = &mut self.params[id];
        if data.len() != p.value.len() {
            return Err(Error::shape(
                "assign",
                format!("`{}` has {} values, got {}", p.name, p.value.len(), data.len()),
            ));
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Zero-filled gradient buffers laid out like the store.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect()
    }

    /// Installs gradient buffers produced by [`ParamStore::zero_grads`].
    pub fn set_grads(&mut self, grads: Vec<Vec<T>>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(
                "set_grads",
                format!("{} buffers for {} parameters", grads.len(), self.params.len()),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.value.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// One bias-corrected Adam update of every parameter. Gradients are
    /// consumed; a parameter without a gradient is an error and leaves the
    /// store untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        for p in &mut self.params {
            let grad = p.value.grad().map(<[T]>::to_vec).unwrap_or_default();
            p.value.clear_grad();
            for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(&mut p.m).zip(&mut p.v) {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
