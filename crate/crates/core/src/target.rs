//! Noise-free contrast target extraction.
//!
//! A logistic gate on the noise-normalized standard-dose subtraction assigns
//! each voxel a contrast probability; the training target is the gated
//! subtraction. The gate is anchored to the noise level: probability 0.01 at
//! one sigma and 0.99 at four sigma, which puts the midpoint at 2.5 sigma.

use crate::error::{CoreError, Result};
use crate::volio::Volume;

/// Parameters of the voxelwise gate `p = sigmoid(w * z + b)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogisticParams {
    pub w: f64,
    pub b: f64,
}

/// Closed-form gate parameters for a given noise level.
///
/// Solving `sigmoid(w*sigma + b) = 0.01` and `sigmoid(w*4*sigma + b) = 0.99`
/// gives `w = 2*ln(99) / (3*sigma)` and `b = -(5/3)*ln(99)`; the intercept is
/// independent of sigma.
pub fn fit_logistic_params(sigma: f64) -> Result<LogisticParams> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CoreError::validation(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let ln99 = 99.0f64.ln();
    Ok(LogisticParams {
        w: 2.0 * ln99 / (3.0 * sigma),
        b: -(5.0 / 3.0) * ln99,
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Voxelwise contrast probability `sigmoid(w * z + b)`.
pub fn ce_probability(z: &Volume, params: &LogisticParams) -> Volume {
    let data: Vec<f32> = z
        .data
        .iter()
        .map(|&v| sigmoid(params.w * v as f64 + params.b) as f32)
        .collect();
    z.like(data).expect("same grid")
}

/// Contrast probability and gated target extracted from a normalized
/// standard-dose subtraction.
#[derive(Debug, Clone)]
pub struct TargetBundle {
    pub probability: Volume,
    pub target: Volume,
}

/// `y = p (.) z`: the subtraction with noise suppressed by the gate.
pub fn extract_target(z: &Volume, params: &LogisticParams) -> TargetBundle {
    let probability = ce_probability(z, params);
    let target = z
        .like(
            z.data
                .iter()
                .zip(&probability.data)
                .map(|(&v, &p)| p * v)
                .collect(),
        )
        .expect("same grid");
    TargetBundle {
        probability,
        target,
    }
}
