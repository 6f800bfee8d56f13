//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

/// One Adam update. Rejects the step (leaving parameters and moments
/// untouched) when any gradient is non-finite.
pub fn optimizer_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if grads.grads.len() != store.len() {
        return Err(Error::domain("gradient set does not match parameter store"));
    }
    for (id, g) in store.ids().zip(&grads.grads) {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: store.optimizer.step as usize,
                msg: format!("non-finite gradient for `{}`[{k}]; step rejected", store.name(id)),
            });
        }
    }

    let step = store.optimizer.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let g = &grads.grads[i];
        let (m, v) = {
            let opt = &mut store.optimizer;
            (
                std::mem::take(&mut opt.first_moment[i]),
                std::mem::take(&mut opt.second_moment[i]),
            )
        };
        let mut m = m;
        let mut v = v;
        let p = &mut store.tensor_mut(id).data;
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        store.optimizer.first_moment[i] = m;
        store.optimizer.second_moment[i] = v;
    }
    store.optimizer.step = step;
    Ok(())
}
