use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `w -= lr * wd * w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update of a single buffer. `t` is the 1-based
/// step count after this update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam buffers disagree: params {}, grads {}, m {}, v {}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Contract("adam step count starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        if cfg.weight_decay > 0.0 {
            params[i] -= cfg.lr * cfg.weight_decay * params[i];
        }
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam optimizer state for a whole [`Params`] collection (minimisation).
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros = |p: &Params| p.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using each tensor's accumulated `grad`, then
    /// clears the gradients.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, params has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let cfg = self.config;
        for ((tensor, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let grad = match tensor.grad.take() {
                Some(g) => g,
                None => vec![0.0; tensor.len()],
            };
            adam_step(tensor.data_mut(), &grad, m, v, self.t, &cfg)?;
            tensor.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(())
    }
}
