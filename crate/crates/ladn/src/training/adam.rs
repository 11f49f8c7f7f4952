use std::collections::BTreeMap;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::nets::ParamStore;
use serde::{Deserialize, Serialize};

/// Adam hyperparameters. Defaults match the training recipe: lr 0.001,
/// betas (0.5, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 0.001, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam state for one optimizer (the generator side and discriminator side
/// each own one). Moment buffers are keyed by parameter name and created
/// lazily at the first `apply`; the step counter is shared by every
/// parameter the optimizer touches, matching the usual "one optimizer per
/// network group" arrangement.
#[derive(Debug, Clone)]
pub struct SideOptimizer<T: Real> {
    pub hp: AdamParams,
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> SideOptimizer<T> {
    pub fn new(hp: AdamParams) -> Self {
        SideOptimizer { hp, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One Adam update over the given (name, gradient) pairs. Arithmetic
    /// runs in f64 and the result is cast back to the store's precision so
    /// the f32 production path and the f64 gradient-check path share the
    /// same update rule.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &[(String, Vec<T>)]) -> Result<()> {
        self.t += 1;
        let b1 = self.hp.beta1;
        let b2 = self.hp.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, grad) in grads {
            let entry = store.entry_mut(name)?;
            if grad.len() != entry.data.len() {
                return Err(Error::Shape(format!(
                    "gradient for '{}' has {} elements, parameter has {}",
                    name,
                    grad.len(),
                    entry.data.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::ZERO; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::ZERO; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i].to_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of '{}' is {}", name, g)));
                }
                let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = self.hp.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.hp.eps);
                entry.data[i] = T::from_f64(entry.data[i].to_f64() - update);
            }
        }
        Ok(())
    }

    /// Casts the optimizer state to another precision (used when a
    /// checkpoint trained in f32 seeds an f64 probe).
    pub fn cast<U: Real>(&self) -> SideOptimizer<U> {
        let conv = |m: &BTreeMap<String, Vec<T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| U::from_f64(x.to_f64())).collect()))
                .collect()
        };
        SideOptimizer { hp: self.hp, t: self.t, m: conv(&self.m), v: conv(&self.v) }
    }
}
