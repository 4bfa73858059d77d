//! Named parameter storage with gradient buffers and the Adam update.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor2;

/// One named parameter: value, gradient, and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Insertion-ordered parameter store.
///
/// Iteration order is the registration order, so updates and serialization
/// are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Gradient and moments start at zero.
    pub fn insert(&mut self, name: &str, value: Tensor2) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter '{name}' registered twice"
            )));
        }
        let (r, c) = value.shape();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Add `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor2) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::DimMismatch {
                op: "accumulate_grad",
                expected: p.grad.shape(),
                got: delta.shape(),
            });
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Standard Adam update with bias correction.
    ///
    /// Consumes the current gradient buffers (they are zeroed afterwards) and
    /// increments the shared step counter.
    pub fn adam_step(&mut self, lr: f64, betas: (f64, f64), eps: f64) {
        let (b1, b2) = betas;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for p in &mut self.entries {
            let grad = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(grad) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(grad) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Step-decay schedule: `base_lr * gamma^floor(epoch / step_size)`.
pub fn step_lr(base_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    debug_assert!(step_size >= 1);
    base_lr * gamma.powi((epoch / step_size) as i32)
}
