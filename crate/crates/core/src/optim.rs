//! AdamW with decoupled weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adamw betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adamw eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adamw weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One AdamW update of `params` in place.
pub fn adamw_step(
    params: &mut [f64],
    state: &mut OptimizerState,
    grads: &[f64],
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::DimensionMismatch(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            index,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2_sqrt = (1.0 - cfg.beta2.powi(t)).sqrt();
    let step_size = lr / bias1;
    for i in 0..params.len() {
        let g = grads[i];
        params[i] *= 1.0 - lr * cfg.weight_decay;
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let denom = v.sqrt() / bias2_sqrt + cfg.eps;
        params[i] -= step_size * *m / denom;
    }
    Ok(())
}

/// `base * decay^floor(iter / every)`.
pub fn step_lr(base: f64, decay: f64, every: usize, iter: usize) -> f64 {
    let k = if every == 0 { 0 } else { iter / every };
    base * decay.powi(k as i32)
}
