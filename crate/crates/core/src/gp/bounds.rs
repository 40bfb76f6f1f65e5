//! Confidence multipliers `β` and error radii `ρ̄` of a frozen GP.

use super::GpModel;
use crate::error::{Error, Result};

/// `√(2B² + 300 γ ln³((N+1)/(1 − δ^{1/c})))` for `c` output channels.
pub fn beta(delta: f64, rkhs_bound: f64, info_gain: f64, samples: usize, channels: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("confidence δ = {delta} must lie in (0, 1)")));
    }
    if channels == 0 || rkhs_bound < 0.0 || info_gain < 0.0 {
        return Err(Error::InvalidInput(
            "β needs at least one channel and non-negative B, γ".into(),
        ));
    }
    // 1 − δ^{1/c} without cancellation.
    let tail = -(delta.ln() / channels as f64).exp_m1();
    let l = ((samples as f64 + 1.0) / tail).ln();
    Ok((2.0 * rkhs_bound * rkhs_bound + 300.0 * info_gain * l * l * l).sqrt())
}

/// Per-model confidence after a union bound over `agents + 1` models.
pub fn confidence_split(delta: f64, agents: usize) -> f64 {
    1.0 - (1.0 - delta) / (agents as f64 + 1.0)
}

/// Twice the largest per-channel RKHS norm of the posterior mean.
pub fn rkhs_bound_estimate(model: &GpModel) -> f64 {
    2.0 * model.rkhs_norms().into_iter().fold(0.0, f64::max)
}

/// `β_i` per channel of one frozen model.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceBound {
    pub rkhs_bound: f64,
    pub info_gain: Vec<f64>,
    pub delta: f64,
    pub samples: usize,
    pub beta: Vec<f64>,
}

impl ConfidenceBound {
    /// Uses the realized information gain of the model's data; `B` defaults to
    /// [`rkhs_bound_estimate`].
    pub fn new(model: &GpModel, delta: f64, rkhs_bound: Option<f64>) -> Result<Self> {
        let b = rkhs_bound.unwrap_or_else(|| rkhs_bound_estimate(model));
        let info_gain = model.info_gain();
        let beta = info_gain
            .iter()
            .map(|&g| beta(delta, b, g, model.len(), model.out_dim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConfidenceBound {
            rkhs_bound: b,
            info_gain,
            delta,
            samples: model.len(),
            beta,
        })
    }

    /// `ρ̄(x) = ‖(β_i σ_i(x))_i‖₂`.
    pub fn rho(&self, model: &GpModel, x: &[f64]) -> f64 {
        let post = model.posterior(x);
        self.beta
            .iter()
            .zip(&post.variance)
            .map(|(b, v)| b * b * v)
            .sum::<f64>()
            .sqrt()
    }
}
