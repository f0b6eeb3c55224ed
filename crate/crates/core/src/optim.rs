//! AdamW with decoupled weight decay over denoiser-shaped tensors.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: DenoiserParams,
    pub v: DenoiserParams,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, like: &DenoiserParams) -> Self {
        Self { config, m: like.zeros_like(), v: like.zeros_like(), step: 0 }
    }

    /// One descent step on `grad`. A non-finite gradient leaves everything
    /// untouched and returns `false`.
    pub fn update(&mut self, params: &mut DenoiserParams, grad: &DenoiserParams) -> Result<bool> {
        if grad.tensors().len() != params.tensors().len()
            || grad.tensors().iter().zip(params.tensors()).any(|(g, p)| g.dim() != p.dim())
        {
            return Err(Error::Shape("gradient does not match parameters".into()));
        }
        if !grad.is_finite() {
            log::warn!("non-finite gradient, skipping update");
            return Ok(false);
        }
        let AdamWConfig { lr, weight_decay, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, (m, v)), g) in tensors.zip(moments).zip(grad.tensors()) {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps) + lr * weight_decay * *p;
            });
        }
        Ok(true)
    }
}
