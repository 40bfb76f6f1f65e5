//! Learning labels: the part of the measured dynamics not explained by the
//! nominal model, from central differences of logged states.

use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::payload_features;
use crate::agent::{AgentInput, AgentModel, AgentState};
use crate::control::ReferenceSample;
use crate::error::{Error, Result};
use crate::payload::{contact_force, PayloadParams, PayloadState};

/// How the contact forces used by the labeler are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaEstimate {
    /// Multipliers re-solved at the labelled state.
    Exact,
    /// Exact multipliers plus white noise of the given standard deviation (N).
    Noisy { std: f64 },
}

/// Mean of two inputs held over consecutive steps; a central difference
/// straddling both steps sees their average.
pub fn average_inputs(a: &AgentInput, b: &AgentInput) -> AgentInput {
    AgentInput {
        thrust: 0.5 * (a.thrust + b.thrust),
        torque: (a.torque + b.torque) * 0.5,
        joint_torque: (&a.joint_torque + &b.joint_torque) * 0.5,
    }
}

fn check_window(len: usize, h: f64) -> Result<()> {
    if len != 3 {
        return Err(Error::InvalidInput(format!(
            "labels need three consecutive samples, got {len}"
        )));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("sample step {h} must be positive")));
    }
    Ok(())
}

/// Agent label `(y^x, y^ω, y^ṙ)` at the middle of a three-sample window:
/// `y^x = m ẍ − m a_g − R e₃ u + Σ_b λ̂_b` (the agent receives `−λ̂`) and
/// `(y^ω, y^ṙ) = (μ̇, ν̇) − nominal momentum rate + Σ_b J_bᵀ λ̂_b`.
pub fn label_agent(
    model: &AgentModel,
    window: &[AgentState],
    h: f64,
    input: &AgentInput,
    lambda_hat: &[Vector3<f64>],
    gravity: &Vector3<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_window(window.len(), h)?;
    let (prev, cur, next) = (&window[0], &window[1], &window[2]);
    let blocks = model.mass_blocks(&cur.r)?;
    let m = blocks.mass;
    let acc = (next.v - prev.v) / (2.0 * h);
    let lam_sum: Vector3<f64> = lambda_hat.iter().sum();
    let thrust = cur.rot.matrix() * Vector3::z() * input.thrust;
    let y_x = acc * m - gravity * m - thrust + lam_sum;
    let p_dot = (next.momentum() - prev.momentum()) / (2.0 * h);
    let nominal = model.nominal_momentum_rate(cur, &blocks, input)?;
    let contact = model.contact_generalized_force(cur, lambda_hat);
    let y_p = p_dot - nominal + contact;
    let mut y = Vec::with_capacity(6 + cur.r.len());
    y.extend_from_slice(y_x.as_slice());
    y.extend_from_slice(y_p.as_slice());
    Ok((cur.features(), y))
}

/// Payload label `(y^p, y^ω)` under the labeler's (nominal) parameters:
/// `y^p = m v̇ − Σλ̂ − m a_g`, `y^ω = J ω̇ + ω × Jω − Σ c × (Rᵀλ̂)`.
pub fn label_payload(
    params: &PayloadParams,
    window: &[PayloadState],
    h: f64,
    lambda_hat: &DVector<f64>,
    reference: &ReferenceSample,
    gravity: &Vector3<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_window(window.len(), h)?;
    let (prev, cur, next) = (&window[0], &window[1], &window[2]);
    let v_dot = (next.v - prev.v) / (2.0 * h);
    let w_dot = (next.omega - prev.omega) / (2.0 * h);
    let rt = cur.rot.matrix().transpose();
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for (i, c) in params.attachments.iter().enumerate() {
        let lam = contact_force(lambda_hat, i);
        force += lam;
        torque += c.cross(&(rt * lam));
    }
    let j = &params.inertia;
    let w = cur.omega;
    let y_p = v_dot * params.mass - force - gravity * params.mass;
    let y_w = j * w_dot + w.cross(&(j * w)) - torque;
    let y = vec![y_p.x, y_p.y, y_p.z, y_w.x, y_w.y, y_w.z];
    Ok((payload_features(cur, reference), y))
}

/// Adds independent `N(0, std²)` measurement noise to every label entry.
pub fn add_label_noise<R: Rng>(y: &mut [f64], std: f64, rng: &mut R) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        for v in y {
            *v += normal.sample(rng);
        }
    }
}
