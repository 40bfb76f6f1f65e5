//! Leader payload-wrench generation, grasp allocation, per-agent realization
//! of commanded contact forces, and interface diagnostics.

pub mod allocation;
pub mod interface;
pub mod realization;

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::gp::{payload_features, GpModel};
use crate::liegroup::{hat, AttitudeError, Rotation};
use crate::payload::PayloadState;

pub use allocation::{allocate, Allocation, Allocator, InternalForceMode};
pub use interface::{fit_interface_constants, wrench_mismatch, InterfaceFit, InterfaceSample, RealizationDiagnostics};
pub use realization::{AgentGains, RealizationMemory, RealizationOutput, Realizer};

/// Gain matrices of the payload tracking law.
#[derive(Clone, Debug, PartialEq)]
pub struct PayloadGains {
    pub k_p: Matrix3<f64>,
    pub k_v: Matrix3<f64>,
    pub k_r: Matrix3<f64>,
    pub k_omega: Matrix3<f64>,
}

impl PayloadGains {
    pub fn diagonal(k_p: f64, k_v: f64, k_r: f64, k_omega: f64) -> Self {
        PayloadGains {
            k_p: Matrix3::identity() * k_p,
            k_v: Matrix3::identity() * k_v,
            k_r: Matrix3::identity() * k_r,
            k_omega: Matrix3::identity() * k_omega,
        }
    }

    /// `K_p = 4I`, `K_v = 4I`, and attitude gains scaled by `tr(J)/3`.
    pub fn scaled_default(inertia: &Matrix3<f64>) -> Self {
        let j = inertia.trace() / 3.0;
        Self::diagonal(4.0, 4.0, 8.0 * j, 2.5 * j)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("k_p", &self.k_p), ("k_v", &self.k_v), ("k_r", &self.k_r), ("k_omega", &self.k_omega)] {
            let asym = (m - m.transpose()).norm();
            if asym > 1e-12 || m.symmetric_eigenvalues().min() <= 0.0 {
                return Err(Error::Configuration(format!(
                    "gain {name} must be symmetric positive definite"
                )));
            }
        }
        Ok(())
    }
}

/// Reference values at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSample {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub rot: Rotation,
    pub omega: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
}

/// Smooth payload reference with constant desired attitude.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    Hover {
        p: Vector3<f64>,
        rot: Rotation,
    },
    /// `x = A sin(wt)`, `y = (A/2) sin(2wt)` about `center`.
    FigureEight {
        center: Vector3<f64>,
        amplitude: f64,
        frequency: f64,
        rot: Rotation,
    },
}

impl Reference {
    pub fn sample(&self, t: f64) -> ReferenceSample {
        match self {
            Reference::Hover { p, rot } => ReferenceSample {
                p: *p,
                v: Vector3::zeros(),
                a: Vector3::zeros(),
                rot: *rot,
                omega: Vector3::zeros(),
                omega_dot: Vector3::zeros(),
            },
            Reference::FigureEight {
                center,
                amplitude,
                frequency,
                rot,
            } => {
                let (a, w) = (*amplitude, *frequency);
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                ReferenceSample {
                    p: center + Vector3::new(a * s1, 0.5 * a * s2, 0.0),
                    v: Vector3::new(a * w * c1, a * w * c2, 0.0),
                    a: Vector3::new(-a * w * w * s1, -2.0 * a * w * w * s2, 0.0),
                    rot: *rot,
                    omega: Vector3::zeros(),
                    omega_dot: Vector3::zeros(),
                }
            }
        }
    }
}

/// Payload tracking errors.
#[derive(Clone, Debug, PartialEq)]
pub struct PayloadErrors {
    pub e_p: Vector3<f64>,
    pub e_v: Vector3<f64>,
    pub attitude: AttitudeError,
}

pub fn payload_errors(payload: &PayloadState, reference: &ReferenceSample) -> PayloadErrors {
    PayloadErrors {
        e_p: payload.p - reference.p,
        e_v: payload.v - reference.v,
        attitude: AttitudeError::new(&payload.rot, &payload.omega, &reference.rot, &reference.omega),
    }
}

/// Desired payload wrench: force in the inertial frame, torque in the payload frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WrenchCommand {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl WrenchCommand {
    /// `[F; R_L τ]`, the frame used by the grasp matrix.
    pub fn inertial(&self, rot: &Rotation) -> Vector6<f64> {
        let tau = rot.matrix() * self.torque;
        Vector6::new(self.force.x, self.force.y, self.force.z, tau.x, tau.y, tau.z)
    }
}

/// Mass and inertia the leader believes the payload has.
#[derive(Clone, Debug, PartialEq)]
pub struct NominalPayload {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
}

/// Geometric payload tracking law without learning.
pub fn wrench_nominal(
    payload: &PayloadState,
    reference: &ReferenceSample,
    gains: &PayloadGains,
    nominal: &NominalPayload,
    gravity: &Vector3<f64>,
) -> WrenchCommand {
    let err = payload_errors(payload, reference);
    let m = nominal.mass;
    let force = reference.a * m - gains.k_p * err.e_p * m - gains.k_v * err.e_v * m - gravity * m;
    let j = &nominal.inertia;
    let w = payload.omega;
    let rel = payload.rot.matrix().transpose() * reference.rot.matrix();
    let torque = -gains.k_r * err.attitude.e_r - gains.k_omega * err.attitude.e_omega + w.cross(&(j * w))
        - j * (hat(&w) * rel * reference.omega - rel * reference.omega_dot);
    WrenchCommand { force, torque }
}

/// Nominal law minus the payload GP posterior mean `(f̂^p, f̂^ω)`.
pub fn wrench_learning(
    payload: &PayloadState,
    reference: &ReferenceSample,
    gains: &PayloadGains,
    nominal: &NominalPayload,
    gravity: &Vector3<f64>,
    gp: &GpModel,
) -> WrenchCommand {
    let mean = gp.mean(&payload_features(payload, reference));
    apply_payload_correction(wrench_nominal(payload, reference, gains, nominal, gravity), &mean)
}

/// Subtracts a learned payload wrench `[f̂^p; f̂^ω]` from a command.
pub fn apply_payload_correction(cmd: WrenchCommand, mean: &[f64]) -> WrenchCommand {
    WrenchCommand {
        force: cmd.force - Vector3::new(mean[0], mean[1], mean[2]),
        torque: cmd.torque - Vector3::new(mean[3], mean[4], mean[5]),
    }
}

/// Payload accelerations `(v̇_L, ω̇_L)` the leader expects when the commanded
/// wrench is realized exactly, under its nominal model plus learned residual.
pub fn predicted_payload_acceleration(
    payload: &PayloadState,
    cmd: &WrenchCommand,
    nominal: &NominalPayload,
    learned: &[f64],
    gravity: &Vector3<f64>,
) -> Vector6<f64> {
    let f_hat = Vector3::new(learned[0], learned[1], learned[2]);
    let t_hat = Vector3::new(learned[3], learned[4], learned[5]);
    let v_dot = (cmd.force + f_hat) / nominal.mass + gravity;
    let w = payload.omega;
    let jinv = nominal.inertia.try_inverse().unwrap_or_else(Matrix3::zeros);
    let w_dot = jinv * (cmd.torque + t_hat - w.cross(&(nominal.inertia * w)));
    Vector6::new(v_dot.x, v_dot.y, v_dot.z, w_dot.x, w_dot.y, w_dot.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::gravity_vector;
    use crate::gp::{GpModel, KernelParams};
    use crate::liegroup::{error_transport_matrix, exp_so3};
    use crate::payload::{payload_rhs, PayloadDisturbance, PayloadParams};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn nominal() -> NominalPayload {
        let p = PayloadParams::plate_default();
        NominalPayload { mass: p.mass, inertia: p.inertia }
    }

    fn random_payload() -> PayloadState {
        PayloadState {
            p: Vector3::new(0.3, -0.1, 1.2),
            v: Vector3::new(0.1, 0.2, -0.3),
            rot: exp_so3(&Vector3::new(0.3, -0.2, 0.5)),
            omega: Vector3::new(0.4, -0.1, 0.2),
        }
    }

    fn moving_reference() -> ReferenceSample {
        ReferenceSample {
            p: Vector3::new(0.0, 0.0, 1.0),
            v: Vector3::new(0.2, 0.0, 0.0),
            a: Vector3::new(0.0, 0.1, 0.0),
            rot: exp_so3(&Vector3::new(0.0, 0.1, -0.2)),
            omega: Vector3::new(0.1, 0.2, -0.3),
            omega_dot: Vector3::new(-0.2, 0.1, 0.05),
        }
    }

    #[test]
    fn errors_on_and_off_reference() {
        let r = moving_reference();
        let on = PayloadState { p: r.p, v: r.v, rot: r.rot, omega: r.omega };
        let e = payload_errors(&on, &r);
        assert_eq!(e.e_p, Vector3::zeros());
        assert!(e.attitude.e_r.norm() < 1e-15 && e.attitude.e_omega.norm() < 1e-15);
        let off = PayloadState { p: r.p + Vector3::x(), ..on };
        assert_eq!(payload_errors(&off, &r).e_p, Vector3::x());
        let s = random_payload();
        let direct = s.omega - s.rot.matrix().transpose() * r.rot.matrix() * r.omega;
        assert_relative_eq!(payload_errors(&s, &r).attitude.e_omega, direct, epsilon = 1e-15);
    }

    #[test]
    fn hover_wrench_balances_gravity() {
        let nom = nominal();
        let r = Reference::Hover { p: Vector3::new(0.0, 0.0, 1.0), rot: Rotation::identity() }.sample(0.0);
        let s = PayloadState::at_rest(r.p);
        let gains = PayloadGains::scaled_default(&nom.inertia);
        let w = wrench_nominal(&s, &r, &gains, &nom, &gravity_vector());
        assert_relative_eq!(w.force, Vector3::new(0.0, 0.0, nom.mass * 9.81), epsilon = 1e-12);
        assert_eq!(w.torque, Vector3::zeros());
        let off = PayloadState::at_rest(r.p + Vector3::new(0.1, 0.0, 0.0));
        let w2 = wrench_nominal(&off, &r, &gains, &nom, &gravity_vector());
        assert_relative_eq!(w2.force - w.force, -gains.k_p * Vector3::new(0.1, 0.0, 0.0) * nom.mass, epsilon = 1e-12);
    }

    #[test]
    fn closed_loop_error_dynamics_by_substitution() {
        let nom = nominal();
        let params = PayloadParams::plate_default();
        let gains = PayloadGains::diagonal(3.0, 2.0, 0.5, 0.2);
        let s = random_payload();
        let r = moving_reference();
        let g = gravity_vector();
        let w = wrench_nominal(&s, &r, &gains, &nom, &g);
        // Realize the wrench with a single force at the payload origin plus a
        // pure couple: two opposite forces along a body axis.
        let lambdas = wrench_as_contacts(&params, &s, &w);
        let d = payload_rhs(&params, &s, &lambdas, &PayloadDisturbance::zero(), &g);
        let err = payload_errors(&s, &r);
        let ev_dot = d.v_dot - r.a;
        assert!((ev_dot - (-gains.k_p * err.e_p - gains.k_v * err.e_v)).norm() < 1e-10);
        // ė_ω = ω̇ + hat(ω)RᵀR_dω_d − RᵀR_dω̇_d and J ė_ω = −K_R e_R − K_ω e_ω.
        let rel = s.rot.matrix().transpose() * r.rot.matrix();
        let eom_dot = d.omega_dot + hat(&s.omega) * rel * r.omega - rel * r.omega_dot;
        let expected = nom.inertia.try_inverse().unwrap()
            * (-gains.k_r * err.attitude.e_r - gains.k_omega * err.attitude.e_omega);
        assert!((eom_dot - expected).norm() < 1e-10);
        let _ = error_transport_matrix(&s.rot, &r.rot);
    }

    /// Four contact forces whose grasp wrench is `cmd` (least-squares through G).
    fn wrench_as_contacts(params: &PayloadParams, s: &PayloadState, cmd: &WrenchCommand) -> Vec<Vector3<f64>> {
        let g = crate::payload::grasp_matrix(&s.rot, &params.attachments);
        let w = cmd.inertial(&s.rot);
        let lam = g.clone().pseudo_inverse(1e-12).unwrap() * DVector::from_column_slice(w.as_slice());
        (0..4).map(|i| crate::payload::contact_force(&lam, i)).collect()
    }

    #[test]
    fn zero_gp_is_bit_identical() {
        let nom = nominal();
        let gains = PayloadGains::scaled_default(&nom.inertia);
        let s = random_payload();
        let r = moving_reference();
        let prior = GpModel::prior(20, vec![KernelParams::isotropic(20, 1.0, 1.0, 0.01); 6]);
        let a = wrench_nominal(&s, &r, &gains, &nom, &gravity_vector());
        let b = wrench_learning(&s, &r, &gains, &nom, &gravity_vector(), &prior);
        assert_eq!(a, b);
    }

    #[test]
    fn constant_disturbance_fit_shifts_force() {
        let nom = nominal();
        let gains = PayloadGains::scaled_default(&nom.inertia);
        let s = random_payload();
        let r = moving_reference();
        let d = [0.5, -0.3, 0.8, 0.0, 0.0, 0.0];
        // Labels equal to the constant at scattered inputs, very small noise and
        // long length-scales: the posterior mean reproduces the constant.
        let mut data = crate::gp::Dataset::new(20, 6);
        for k in 0..30 {
            let mut x = payload_features(&s, &r);
            x[(k % 20) as usize] += 0.01 * k as f64;
            data.push(x, d.to_vec()).unwrap();
        }
        let params = vec![KernelParams::isotropic(20, 1.0, 1e3, 1e-8); 6];
        let gp = GpModel::fit(&data, params).unwrap();
        let a = wrench_nominal(&s, &r, &gains, &nom, &gravity_vector());
        let b = wrench_learning(&s, &r, &gains, &nom, &gravity_vector(), &gp);
        assert_relative_eq!(b.force - a.force, -Vector3::new(d[0], d[1], d[2]), epsilon = 1e-4);
        assert!((b.torque - a.torque).norm() < 1e-4);
    }
}
