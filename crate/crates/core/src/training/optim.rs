use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: parameters are multiplied by `1 − lr·weight_decay` each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    /// Applies one update using the gradients stored in `store`; a missing
    /// gradient counts as zero. `lr_of(name)` gives each parameter's
    /// current learning rate. Nothing is modified if any gradient is NaN.
    pub fn step(&mut self, store: &mut ParamStore, lr_of: impl Fn(&str) -> f64) -> Result<()> {
        for (name, p) in store.iter() {
            if let Some(g) = &p.grad {
                if g.data().iter().any(|v| v.is_nan()) {
                    return Err(Error::NanGradient(name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let len = p.value.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            if m.len() != len {
                return Err(Error::ConfigMismatch(format!("optimizer state for '{name}' has the wrong size")));
            }
            let lr = lr_of(name);
            let decay = 1.0 - lr * c.weight_decay;
            let grad = p.grad.as_ref().map(|g| g.data());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
