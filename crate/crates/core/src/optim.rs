//! Adam with a constant learning rate and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Params, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 3e-4, beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 1.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("eps must be positive and clip_norm non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &Params<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, step: 0, m: Params::zeros_like(params), v: Params::zeros_like(params) })
    }

    /// Applies one update in place. Returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut Params<T>, grads: &mut Params<T>) -> Result<f64> {
        if grads.names != params.names || self.m.names != params.names {
            return Err(Error::Shape("gradient layout differs from parameter layout".into()));
        }
        let norm = grads.global_norm().to_f64().unwrap_or(f64::NAN);
        if !norm.is_finite() {
            return Err(Error::InvalidArgument("non-finite gradient".into()));
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(T::from(self.cfg.clip_norm / norm).unwrap());
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let lr_t = self.cfg.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let (b1, b2, lr_t, eps) = (T::from(b1).unwrap(), T::from(b2).unwrap(), T::from(lr_t).unwrap(), T::from(self.cfg.eps).unwrap());
        let one = T::one();
        for i in 0..params.tensors.len() {
            let p = params.tensors[i].as_slice_mut().expect("contiguous");
            let g = grads.tensors[i].as_slice().expect("contiguous");
            let m = self.m.tensors[i].as_slice_mut().expect("contiguous");
            let v = self.v.tensors[i].as_slice_mut().expect("contiguous");
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p[j] -= lr_t * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
