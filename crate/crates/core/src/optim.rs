//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counters, one slot per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    /// Number of `step` calls.
    pub step: u64,
    /// Updates applied to each parameter (drives bias correction).
    pub param_steps: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        AdamWState {
            config,
            step: 0,
            param_steps: vec![0; params.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the buffers line up with `params`.
    pub fn validate(&self, params: &ParamStore) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && self.param_steps.len() == params.len()
            && params
                .entries()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(e, (m, v))| m.len() == e.value.numel() && v.len() == e.value.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("optimizer state does not match parameters".into()))
        }
    }

    /// Applies one update to every parameter that received a gradient.
    /// Parameters the loss did not reach are left untouched, moments included.
    ///
    /// Aborts without modifying anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.param(id) {
                if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for {} at element {pos}",
                        params.name(id)
                    )));
                }
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        self.step += 1;
        for id in params.ids() {
            let Some(g) = grads.param(id) else {
                continue;
            };
            let i = id.index();
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = 1.0 - lr * weight_decay;
            for (((p, g), m), v) in params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
