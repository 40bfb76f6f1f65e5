//! Invariant suite: numerical checks of the building blocks against
//! independent oracles, plus short closed-loop invariance checks.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{EtaProfile, ScenarioConfig};
use super::payload_only::eta_experiment;
use super::runner::run_case;
use super::Case;
use crate::agent::{AgentInput, AgentModel, AgentState};
use crate::control::Allocator;
use crate::error::Result;
use crate::gp::{beta, Dataset, GpModel, KernelParams, JITTER};
use crate::liegroup::{exp_so3, hat, vee};
use crate::payload::{grasp_matrix, CoupledSystem, PayloadState};

/// Outcome of one check: `value` compared against `tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &'static str, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            passed: value <= tolerance && value.is_finite(),
            value,
            tolerance,
            detail: format!("{value:.3e} <= {tolerance:.1e}"),
        }
    }

    fn within(name: &'static str, value: f64, target: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            passed: (value - target).abs() <= tolerance,
            value,
            tolerance,
            detail: format!("{value:.4} vs {target} ± {tolerance}"),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec3<R: Rng>(r: &mut R, s: f64) -> Vector3<f64> {
    Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
}

/// `vee(hat(v)) == v` and `hat(vee(S)) == S` bit for bit.
pub fn hat_vee_round_trip(samples: usize) -> CheckResult {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let v = rand_vec3(&mut r, 10.0);
        let back = vee(&hat(&v)).map(|b| (b - v).amax()).unwrap_or(f64::INFINITY);
        let s = hat(&rand_vec3(&mut r, 10.0));
        let again = vee(&s).map(|w| (hat(&w) - s).amax()).unwrap_or(f64::INFINITY);
        worst = worst.max(back).max(again);
    }
    CheckResult::below("hat/vee round trip", worst, 0.0)
}

fn random_agent_state<R: Rng>(model: &AgentModel, r: &mut R) -> AgentState {
    let n = model.n_joints();
    let joints = DVector::from_fn(n, |_, _| r.random_range(-0.6..0.6));
    let rates = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
    model
        .state(
            exp_so3(&rand_vec3(r, 1.0)),
            rand_vec3(r, 1.0),
            joints,
            rand_vec3(r, 2.0),
            rand_vec3(r, 1.0),
            rates,
        )
        .expect("valid random agent state")
}

/// `M̄` against the inverse of the `(ω, ṙ)` block of `M₀⁻¹`.
pub fn reduced_mass_oracle(model: &AgentModel, samples: usize) -> Result<CheckResult> {
    let mut r = rng(2);
    let n = model.n_joints();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let joints = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let blocks = model.mass_blocks(&joints)?;
        let inv = blocks.assemble().try_inverse().expect("positive definite");
        let idx: Vec<usize> = (0..3).chain(6..6 + n).collect();
        let sub = DMatrix::from_fn(3 + n, 3 + n, |i, j| inv[(idx[i], idx[j])]);
        let oracle = sub.try_inverse().expect("positive definite");
        let rel = (blocks.reduced() - &oracle).norm() / oracle.norm();
        worst = worst.max(rel);
    }
    Ok(CheckResult::below("reduced mass matrix vs block elimination", worst, 1e-10))
}

/// Contact Jacobians against central differences of `R d_b(r)`.
pub fn contact_jacobian_fd(model: &AgentModel, samples: usize) -> CheckResult {
    let mut r = rng(3);
    let n = model.n_joints();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let s = random_agent_state(model, &mut r);
        let w = rand_vec3(&mut r, 1.0);
        let rd = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let mut xi = DVector::zeros(3 + n);
        xi.rows_mut(0, 3).copy_from(&w);
        xi.rows_mut(3, n).copy_from(&rd);
        for b in 0..n {
            let at = |e: f64| {
                let rot = s.rot.matrix() * exp_so3(&(w * e)).matrix();
                rot * model.contact_offset(&(&s.r + &rd * e), b)
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            let an = model.contact_jacobian(&s, b) * &xi;
            worst = worst.max((Vector3::new(an[0], an[1], an[2]) - fd).norm());
        }
    }
    CheckResult::below("contact Jacobian vs finite differences", worst, 1e-6)
}

/// `½ ξ̄ᵀ ∂M̄ ξ̄` against forward differences of the kinetic energy; the error
/// must halve with the step.
pub fn quadratic_term_convergence(model: &AgentModel) -> CheckResult {
    let mut r = rng(4);
    let s = random_agent_state(model, &mut r);
    let xi = s.xi();
    let n = model.n_joints();
    let analytic = crate::agent::quadratic_mass_term(&model.reduced_mass_derivatives(&s.r), &xi);
    let energy = |joints: &DVector<f64>| 0.5 * xi.dot(&(model.mass_blocks_unchecked(joints).reduced() * &xi));
    let err = |h: f64| {
        (0..n)
            .map(|k| {
                let mut rp = s.r.clone();
                rp[k] += h;
                ((energy(&rp) - energy(&s.r)) / h - analytic[3 + k]).abs()
            })
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (err(1e-3), err(5e-4));
    let order = (e1 / e2).log2();
    let mut c = CheckResult::within("quadratic mass term first-order convergence", order, 1.0, 0.1);
    c.detail = format!("observed order {order:.3} (errors {e1:.2e}, {e2:.2e})");
    c
}

fn coupled_start(sys: &CoupledSystem) -> Result<crate::payload::CoupledState> {
    let mut p = PayloadState::at_rest(Vector3::new(0.0, 0.0, 1.0));
    p.v = Vector3::new(0.2, -0.1, 0.05);
    p.omega = Vector3::new(0.3, -0.2, 0.4);
    sys.rigid_layout(&p)
}

fn excitation(sys: &CoupledSystem) -> Vec<AgentInput> {
    let share = sys.payload.mass / sys.agents.len() as f64;
    sys.agents
        .iter()
        .map(|a| AgentInput {
            thrust: (a.total_mass() + share) * 9.81 + 1.0,
            torque: Vector3::new(0.02, -0.01, 0.015),
            joint_torque: DVector::from_fn(a.n_joints(), |k, _| if k % 2 == 0 { 0.03 } else { -0.02 }),
        })
        .collect()
}

/// Observed order of the coupled RK4 step by Richardson extrapolation.
pub fn rk4_order(sys: &CoupledSystem) -> Result<CheckResult> {
    let z0 = coupled_start(sys)?;
    let u = excitation(sys);
    let horizon = 0.2;
    let run = |h: f64| -> Result<DVector<f64>> {
        let mut z = z0.clone();
        for _ in 0..(horizon / h).round() as usize {
            z = sys.step(&z, &u, h)?;
        }
        Ok(sys.pack(&z))
    };
    let (a, b, c) = (run(0.02)?, run(0.01)?, run(0.005)?);
    let order = ((&a - &b).norm() / (&b - &c).norm()).log2();
    let mut res = CheckResult::within("RK4 order by Richardson", order, 4.0, 0.3);
    res.detail = format!("observed order {order:.3}");
    Ok(res)
}

/// GP posterior mean and variance against a dense LU solve.
pub fn gp_dense_oracle() -> Result<CheckResult> {
    let mut r = rng(5);
    let (n, d) = (40, 3);
    let mut data = Dataset::new(d, 2);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = vec![x[0].sin() + x[1] * x[2], (x[0] - x[2]).cos()];
        data.push(x, y)?;
    }
    let params = vec![
        KernelParams {
            signal_variance: 1.3,
            length_scales: vec![0.7, 1.1, 0.9],
            noise_variance: 1e-3,
        },
        KernelParams::isotropic(d, 0.5, 1.5, 1e-2),
    ];
    let model = GpModel::fit(&data, params.clone())?;
    let mut worst: f64 = 0.0;
    for (c, p) in params.iter().enumerate() {
        let k = DMatrix::from_fn(n, n, |i, j| p.eval(&data.inputs()[i], &data.inputs()[j]))
            + DMatrix::identity(n, n) * (p.noise_variance + JITTER);
        let lu = k.lu();
        let y = DVector::from_vec(data.channel(c));
        let alpha = lu.solve(&y).expect("nonsingular");
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.5..2.5)).collect();
            let ks = DVector::from_fn(n, |i, _| p.eval(&data.inputs()[i], &x));
            let mean = ks.dot(&alpha);
            let var = p.signal_variance - ks.dot(&lu.solve(&ks).expect("nonsingular"));
            let post = model.posterior(&x);
            worst = worst.max((post.mean[c] - mean).abs()).max((post.variance[c] - var).abs());
        }
    }
    Ok(CheckResult::below("GP posterior vs dense solve", worst, 1e-10))
}

/// β against values computed with 50-digit arithmetic.
pub fn beta_reference_values() -> Result<CheckResult> {
    let cases: [((f64, f64, f64, usize, usize), f64); 6] = [
        ((0.5, 0.0, 1.0, 0, 9), 72.697788600663457331),
        ((0.9, 0.5, 2.5, 10, 6), 448.48554417774736491),
        ((0.99, 1.2, 0.3, 200, 9), 399.36483941087435088),
        ((0.1, 3.0, 7.0, 50, 6), 523.98301168042917326),
        ((0.95, 0.0, 12.0, 1000, 8), 2482.1894681978541324),
        ((0.9, 2.0, 0.0, 5, 6), 2.8284271247461900976),
    ];
    let mut worst: f64 = 0.0;
    for ((d, b, g, n, c), want) in cases {
        let got = beta(d, b, g, n, c)?;
        worst = worst.max(((got - want) / want).abs());
    }
    Ok(CheckResult::below("beta vs high-precision reference", worst, 1e-12))
}

/// `‖G λ_cmd − W‖` over random poses, wrenches and internal-force inputs.
pub fn wrench_consistency(cfg: &ScenarioConfig, samples: usize) -> Result<CheckResult> {
    let att = cfg.nominal_payload_params().attachments;
    let alloc = Allocator::new(&att, &cfg.control.leader, cfg.internal_mode())?;
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let rot = exp_so3(&rand_vec3(&mut r, 3.0));
        let w = Vector6::from_fn(|_, _| r.random_range(-50.0..50.0));
        let eta = DVector::from_fn(alloc.nullspace_dim(), |_, _| r.random_range(-20.0..20.0));
        let lam = alloc.allocate(&w, &rot, &eta)?.lambda_cmd;
        let res = grasp_matrix(&rot, &att) * lam - DVector::from_column_slice(w.as_slice());
        worst = worst.max(res.norm());
    }
    Ok(CheckResult::below("wrench consistency", worst, 1e-9))
}

/// Payload pose divergence between exact-realization runs with and without η.
pub fn internal_force_neutrality(cfg: &ScenarioConfig, horizon: f64) -> Result<CheckResult> {
    let mut c = cfg.clone();
    c.internal_force.profile = EtaProfile::Sine;
    let rep = eta_experiment(&c, horizon)?;
    Ok(CheckResult::below("internal-force neutrality", rep.pose_divergence, 1e-8))
}

/// Largest `‖Φ‖` over a short closed-loop run of the full team.
pub fn constraint_invariance(cfg: &ScenarioConfig, horizon: f64) -> Result<CheckResult> {
    let mut c = cfg.clone();
    c.integrator.horizon = horizon;
    c.gp.update_times.retain(|t| *t < horizon);
    let res = run_case(&c, Case::C3)?;
    Ok(CheckResult::below("constraint invariance (short run)", res.max_phi, 1e-6))
}

/// Every check of the suite on the scenario's agent model and plant.
pub fn run_suite(cfg: &ScenarioConfig) -> Result<Vec<CheckResult>> {
    let model = cfg.agent_model();
    let sys = cfg.build_system()?;
    let text = cfg.to_toml_string()?;
    let round_trip = ScenarioConfig::from_toml_str(&text).map(|c| c == *cfg).unwrap_or(false);
    Ok(vec![
        CheckResult {
            name: "configuration round trip",
            passed: round_trip,
            value: if round_trip { 0.0 } else { 1.0 },
            tolerance: 0.0,
            detail: "TOML write then read".into(),
        },
        hat_vee_round_trip(1000),
        reduced_mass_oracle(&model, 50)?,
        contact_jacobian_fd(&model, 50),
        quadratic_term_convergence(&model),
        rk4_order(&sys)?,
        gp_dense_oracle()?,
        beta_reference_values()?,
        wrench_consistency(cfg, 1000)?,
        internal_force_neutrality(cfg, 2.0)?,
        constraint_invariance(cfg, 1.0)?,
    ])
}
