//! Adam optimizer with bias correction and a cosine learning-rate schedule.

use super::Scalar;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::validation("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::validation("adam eps must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One Adam update. `step` is 1-based (the first call passes 1) so the bias
/// correction `1 - beta^step` is well defined.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(CoreError::shape(format!(
            "adam length mismatch: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(CoreError::validation("adam step index is 1-based"));
    }
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].to_f64c();
        if !g.is_finite() {
            return Err(CoreError::numerical(format!(
                "non-finite gradient component {g} at index {i}"
            )));
        }
        let m = b1 * state.m[i].to_f64c() + (1.0 - b1) * g;
        let v = b2 * state.v[i].to_f64c() + (1.0 - b2) * g * g;
        state.m[i] = T::from_f64c(m);
        state.v[i] = T::from_f64c(v);
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let delta = lr * m_hat / (v_hat.sqrt() + cfg.eps);
        param[i] = T::from_f64c(param[i].to_f64c() - delta);
    }
    Ok(())
}

/// Cosine decay from `lr0` at step 0 to `lr1` at `total` steps; constant at
/// `lr1` afterwards.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr1: f64) -> f64 {
    if total == 0 || step >= total {
        return lr1;
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    lr1 + (lr0 - lr1) * 0.5 * (1.0 + phase.cos())
}
