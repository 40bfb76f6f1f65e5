//! Payload-only simulations in which commanded contact forces are applied
//! exactly: the nominal tracking study and the internal-force study.

use nalgebra::{DVector, Matrix3, Vector3};

use super::config::{EtaProfile, ScenarioConfig};
use super::runner::eta_vector;
use super::{MetricsLog, MetricsRow};
use crate::control::{payload_errors, wrench_nominal, Allocator, PayloadGains, Reference};
use crate::error::{Error, Result};
use crate::liegroup::{exp_so3, hat, Rotation};
use crate::payload::{grasp_matrix, payload_rhs, PayloadDisturbance, PayloadParams, PayloadState};

/// One RK4 step of the payload with contact forces `forces(state, t)`
/// re-evaluated at every stage.
pub fn payload_step(
    params: &PayloadParams,
    disturbance: &PayloadDisturbance,
    gravity: &Vector3<f64>,
    state: &PayloadState,
    t: f64,
    h: f64,
    mut forces: impl FnMut(&PayloadState, f64) -> Result<DVector<f64>>,
) -> Result<PayloadState> {
    let mut deriv = |s: &PayloadState, t: f64| -> Result<[Vector3<f64>; 3]> {
        let lam = forces(s, t)?;
        if lam.len() != 3 * params.attachments.len() {
            return Err(Error::InvalidInput(format!(
                "{} contact force entries for {} attachments",
                lam.len(),
                params.attachments.len()
            )));
        }
        let lambdas: Vec<Vector3<f64>> = (0..params.attachments.len())
            .map(|i| Vector3::new(lam[3 * i], lam[3 * i + 1], lam[3 * i + 2]))
            .collect();
        let d = payload_rhs(params, s, &lambdas, disturbance, gravity);
        Ok([d.p_dot, d.v_dot, d.omega_dot])
    };
    // Rotation rates are R hat(ω); stages use the unprojected matrix.
    let stage = |s: &PayloadState, rot: &Matrix3<f64>, k: &[Vector3<f64>; 3], dr: &Matrix3<f64>, a: f64| {
        (
            PayloadState {
                p: s.p + k[0] * a,
                v: s.v + k[1] * a,
                rot: Rotation::from_matrix_unchecked(rot + dr * a),
                omega: s.omega + k[2] * a,
            },
            rot + dr * a,
        )
    };
    let r0 = *state.rot.matrix();
    let k1 = deriv(state, t)?;
    let d1 = r0 * hat(&state.omega);
    let (s2, r2) = stage(state, &r0, &k1, &d1, 0.5 * h);
    let k2 = deriv(&s2, t + 0.5 * h)?;
    let d2 = r2 * hat(&s2.omega);
    let (s3, r3) = stage(state, &r0, &k2, &d2, 0.5 * h);
    let k3 = deriv(&s3, t + 0.5 * h)?;
    let d3 = r3 * hat(&s3.omega);
    let (s4, r4) = stage(state, &r0, &k3, &d3, h);
    let k4 = deriv(&s4, t + h)?;
    let d4 = r4 * hat(&s4.omega);
    let w = h / 6.0;
    let comb = |i: usize| (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * w;
    Ok(PayloadState {
        p: state.p + comb(0),
        v: state.v + comb(1),
        rot: Rotation::project(&(r0 + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * w)),
        omega: state.omega + comb(2),
    })
}

/// Slowest decay rate of `ë + k_v ė + k_p e = 0`.
pub fn linear_decay_rate(k_p: f64, k_v: f64) -> f64 {
    let disc = k_v * k_v - 4.0 * k_p;
    if disc >= 0.0 {
        0.5 * (k_v - disc.sqrt())
    } else {
        0.5 * k_v
    }
}

/// Measured and predicted exponential rates of the nominal closed loop.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    /// Fitted decay rate of `‖e_p‖`.
    pub rate_p: f64,
    /// Fitted decay rate of `Ψ`.
    pub rate_psi: f64,
    pub predicted_p: f64,
    /// Twice the attitude rate, since `Ψ` is quadratic in the angle.
    pub predicted_psi: f64,
    /// `‖e_p‖` averaged over the last quarter.
    pub steady_e_p: f64,
    /// `(t, ‖e_p‖, Ψ)` at 100 Hz.
    pub trace: Vec<(f64, f64, f64)>,
}

/// Least-squares slope of `−ln y` against `t` on `[t0, t1]`.
fn fitted_rate(trace: &[(f64, f64)], t0: f64, t1: f64) -> f64 {
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .filter(|(t, y)| *t >= t0 && *t <= t1 && *y > 0.0)
        .map(|&(t, y)| (t, y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    -sxy / sxx
}

/// Exact model, no disturbance, desired wrench applied through the leader
/// allocation, hover reference, from a position and attitude offset. Gains
/// are diagonal with `K_R = k_r J` and `K_ω = k_omega J`.
pub fn nominal_decay_experiment(
    cfg: &ScenarioConfig,
    k_p: f64,
    k_v: f64,
    k_r: f64,
    k_omega: f64,
    horizon: f64,
) -> Result<DecayReport> {
    let params = cfg.nominal_payload_params();
    params.validate()?;
    let nominal = cfg.nominal_payload();
    let gains = PayloadGains {
        k_p: Matrix3::identity() * k_p,
        k_v: Matrix3::identity() * k_v,
        k_r: nominal.inertia * k_r,
        k_omega: nominal.inertia * k_omega,
    };
    gains.validate()?;
    let c = cfg.reference.center;
    let center = Vector3::new(c[0], c[1], c[2]);
    let reference = Reference::Hover {
        p: center,
        rot: Rotation::identity(),
    };
    let allocator = Allocator::new(&params.attachments, &cfg.control.leader, cfg.internal_mode())?;
    let eta0 = DVector::zeros(allocator.nullspace_dim());
    let gravity = crate::agent::gravity_vector();
    let dist = PayloadDisturbance::zero();
    let mut s = PayloadState {
        p: center + Vector3::new(0.2, -0.1, 0.15),
        v: Vector3::zeros(),
        rot: exp_so3(&Vector3::new(0.3, -0.2, 0.1)),
        omega: Vector3::zeros(),
    };
    let h = cfg.integrator.dt;
    let steps = (horizon / h).round() as usize;
    let every = cfg.log_every();
    let mut trace = Vec::with_capacity(steps / every + 1);
    for k in 0..=steps {
        let t = k as f64 * h;
        if k % every == 0 {
            let e = payload_errors(&s, &reference.sample(t));
            trace.push((t, e.e_p.norm(), e.attitude.psi));
        }
        if k == steps {
            break;
        }
        s = payload_step(&params, &dist, &gravity, &s, t, h, |st, tt| {
            let w = wrench_nominal(st, &reference.sample(tt), &gains, &nominal, &gravity);
            Ok(allocator.allocate(&w.inertial(&st.rot), &st.rot, &eta0)?.lambda_cmd)
        })?;
    }
    let predicted_p = linear_decay_rate(k_p, k_v);
    let predicted_psi = 2.0 * linear_decay_rate(k_r, k_omega);
    // Fit once the fast modes are gone and before round-off dominates.
    let window = |rate: f64| (3.0 / rate, (12.0 / rate).min(horizon));
    let (a, b) = window(predicted_p);
    let rate_p = fitted_rate(&trace.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(), a, b);
    let (a, b) = window(predicted_psi);
    let rate_psi = fitted_rate(&trace.iter().map(|x| (x.0, x.2)).collect::<Vec<_>>(), a, b);
    let n = trace.len();
    let steady_e_p = trace[n - n / 4..].iter().map(|x| x.1).sum::<f64>() / (n / 4).max(1) as f64;
    Ok(DecayReport {
        rate_p,
        rate_psi,
        predicted_p,
        predicted_psi,
        steady_e_p,
        trace,
    })
}

/// Paired exact-realization runs without and with internal forces.
#[derive(Clone, Debug)]
pub struct EtaReport {
    /// `max_t (‖p₁ − p₀‖ + ‖R₁ − R₀‖_F)`.
    pub pose_divergence: f64,
    /// Largest `‖G λ_cmd − W_cmd‖` over both runs.
    pub max_wrench_residual: f64,
    /// Range of `‖λ₁ − λ₀‖ / ‖η‖` over samples with `η ≠ 0`.
    pub shift_ratio: (f64, f64),
    pub max_lambda_shift: f64,
    pub without: MetricsLog,
    pub with: MetricsLog,
}

/// Simulates the true payload under the scenario's disturbance with the
/// commanded forces applied exactly, once with `η = 0` and once with the
/// configured profile (a unit sine when the profile is zero).
pub fn eta_experiment(cfg: &ScenarioConfig, horizon: f64) -> Result<EtaReport> {
    let sys = cfg.build_system()?;
    let params = sys.payload.clone();
    let nominal = cfg.nominal_payload();
    let gains = cfg.payload_gains();
    let reference = cfg.reference();
    let allocator = Allocator::new(&params.attachments, &cfg.control.leader, cfg.internal_mode())?;
    let mut active = cfg.clone();
    if active.internal_force.profile == EtaProfile::Zero {
        active.internal_force.profile = EtaProfile::Sine;
    }
    let mut zero = cfg.clone();
    zero.internal_force.profile = EtaProfile::Zero;
    let h = cfg.integrator.dt;
    let steps = (horizon / h).round() as usize;
    let every = cfg.log_every();
    let p0 = cfg.payload.initial_position;
    let dim = allocator.nullspace_dim();

    let command = |c: &ScenarioConfig, st: &PayloadState, t: f64| -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let w = wrench_nominal(st, &reference.sample(t), &gains, &nominal, &sys.gravity).inertial(&st.rot);
        let eta = eta_vector(c, dim, t);
        let lam = allocator.allocate(&w, &st.rot, &eta)?.lambda_cmd;
        let g = grasp_matrix(&st.rot, &params.attachments);
        let residual = (&g * &lam - DVector::from_column_slice(w.as_slice())).norm();
        Ok((lam, eta, residual))
    };

    let run = |c: &ScenarioConfig| -> Result<(Vec<PayloadState>, MetricsLog, Vec<DVector<f64>>, f64)> {
        let mut s = PayloadState::at_rest(Vector3::new(p0[0], p0[1], p0[2]));
        let mut states = Vec::new();
        let mut lams = Vec::new();
        let mut log = MetricsLog {
            contacts_per_agent: vec![2; cfg.agent.count],
            rows: Vec::new(),
        };
        let mut max_res: f64 = 0.0;
        for k in 0..=steps {
            let t = k as f64 * h;
            if k % every == 0 {
                let (lam, eta, res) = command(c, &s, t)?;
                max_res = max_res.max(res);
                let e = payload_errors(&s, &reference.sample(t));
                log.rows.push(MetricsRow {
                    t,
                    e_p: e.e_p.norm(),
                    e_v: e.e_v.norm(),
                    e_r: e.attitude.e_r.norm(),
                    e_omega: e.attitude.e_omega.norm(),
                    psi: e.attitude.psi,
                    dw: res,
                    sigma_l: 0.0,
                    sigma_a: 0.0,
                    lambda: (0..params.attachments.len()).map(|i| lam.rows(3 * i, 3).norm()).collect(),
                    eta: eta.norm(),
                    phi: 0.0,
                });
                states.push(s.clone());
                lams.push(lam);
            }
            if k == steps {
                break;
            }
            s = payload_step(&params, &sys.payload_disturbance, &sys.gravity, &s, t, h, |st, tt| {
                Ok(command(c, st, tt)?.0)
            })?;
        }
        Ok((states, log, lams, max_res))
    };

    let (s0, log0, l0, r0) = run(&zero)?;
    let (s1, log1, l1, r1) = run(&active)?;
    let mut divergence: f64 = 0.0;
    let mut ratio = (f64::INFINITY, 0.0f64);
    let mut max_shift: f64 = 0.0;
    for i in 0..s0.len() {
        let d = (s1[i].p - s0[i].p).norm() + (s1[i].rot.matrix() - s0[i].rot.matrix()).norm();
        divergence = divergence.max(d);
        let shift = (&l1[i] - &l0[i]).norm();
        max_shift = max_shift.max(shift);
        let eta = log1.rows[i].eta;
        if eta > 1e-9 {
            let q = shift / eta;
            ratio = (ratio.0.min(q), ratio.1.max(q));
        }
    }
    if ratio.0 > ratio.1 {
        ratio = (0.0, 0.0);
    }
    Ok(EtaReport {
        pose_divergence: divergence,
        max_wrench_residual: r0.max(r1),
        shift_ratio: ratio,
        max_lambda_shift: max_shift,
        without: log0,
        with: log1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_fall_is_integrated_exactly() {
        let params = PayloadParams::plate_default();
        let g = crate::agent::gravity_vector();
        let mut s = PayloadState::at_rest(Vector3::zeros());
        s.v = Vector3::new(1.0, 0.0, 2.0);
        let n = params.attachments.len();
        let mut t = 0.0;
        for _ in 0..100 {
            s = payload_step(&params, &PayloadDisturbance::zero(), &g, &s, t, 0.01, |_, _| Ok(DVector::zeros(3 * n)))
                .unwrap();
            t += 0.01;
        }
        let want = Vector3::new(1.0, 0.0, 2.0) * t + g * (0.5 * t * t);
        assert!((s.p - want).norm() < 1e-12);
    }

    #[test]
    fn torque_free_spin_conserves_angular_momentum() {
        let params = PayloadParams::plate_default();
        let g = Vector3::zeros();
        let mut s = PayloadState::at_rest(Vector3::zeros());
        s.omega = Vector3::new(0.3, 2.0, 0.1);
        let n = params.attachments.len();
        let l0 = s.rot.matrix() * params.inertia * s.omega;
        for k in 0..2000 {
            s = payload_step(&params, &PayloadDisturbance::zero(), &g, &s, k as f64 * 1e-3, 1e-3, |_, _| {
                Ok(DVector::zeros(3 * n))
            })
            .unwrap();
        }
        let l1 = s.rot.matrix() * params.inertia * s.omega;
        assert!((l1 - l0).norm() < 1e-9, "{}", (l1 - l0).norm());
    }

    #[test]
    fn decay_rate_formula() {
        assert_eq!(linear_decay_rate(4.0, 5.0), 1.0);
        assert_eq!(linear_decay_rate(4.0, 4.0), 2.0);
        assert_eq!(linear_decay_rate(10.0, 2.0), 1.0);
    }

    #[test]
    fn internal_forces_leave_payload_unchanged() {
        let cfg = ScenarioConfig::default();
        let rep = eta_experiment(&cfg, 1.0).unwrap();
        assert!(rep.pose_divergence < 1e-10, "{}", rep.pose_divergence);
        assert!(rep.max_wrench_residual < 1e-9);
        assert!(rep.max_lambda_shift > 0.5);
        // Orthonormal nullspace basis: the redistribution has the size of η.
        assert!((rep.shift_ratio.0 - 1.0).abs() < 1e-9 && (rep.shift_ratio.1 - 1.0).abs() < 1e-9);
    }
}
