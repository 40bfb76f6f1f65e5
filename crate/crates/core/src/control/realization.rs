//! Per-agent realization of commanded contact forces.
//!
//! Each agent plans accelerations `(ω̇, v̇, r̈)` that satisfy its own rows of
//! the stabilized grasp constraint for the payload acceleration the leader
//! expects, staying as close as possible to an attitude-tracking target. The
//! base torque and joint torques then realize the rotational and joint
//! accelerations exactly; the translational force is realized only along the
//! thrust axis, whose direction is steered towards the required force.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};

use crate::agent::{AgentInput, AgentModel, AgentState};
use crate::error::{Error, Result};
use crate::liegroup::{attitude_error, Rotation};
use crate::payload::{CoupledState, CoupledSystem};

/// Gains of the agent attitude loop (in angular-acceleration units).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentGains {
    pub k_r: f64,
    pub k_omega: f64,
    /// Weight of the translational and joint accelerations relative to the
    /// angular acceleration in the planning step.
    pub plan_weight: f64,
}

impl Default for AgentGains {
    fn default() -> Self {
        AgentGains {
            k_r: 400.0,
            k_omega: 36.0,
            plan_weight: 1e-3,
        }
    }
}

impl AgentGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_r > 0.0 && self.k_omega > 0.0 && self.plan_weight > 0.0) {
            return Err(Error::Configuration("agent gains must be positive".into()));
        }
        Ok(())
    }
}

/// Last desired attitude of one agent, held while the required force vanishes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RealizationMemory {
    last: Option<Rotation>,
}

/// Inputs of one agent together with the intermediate quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizationOutput {
    pub input: AgentInput,
    pub desired_rot: Rotation,
    /// Translational force the thrust should supply (inertial frame).
    pub force: Vector3<f64>,
    pub attitude_error: Vector3<f64>,
    /// Planned `(ω̇, v̇, r̈)`.
    pub acceleration: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Realizer {
    pub gains: AgentGains,
}

impl Realizer {
    pub fn new(gains: AgentGains) -> Result<Self> {
        gains.validate()?;
        Ok(Realizer { gains })
    }

    /// Inputs for every agent.
    ///
    /// `payload_accel` is the expected `(v̇_L, ω̇_L)`, `learned[j]` the agent
    /// GP mean `(f̂^x, f̂^ω, f̂^ṙ)` (empty for none).
    pub fn realize_team(
        &self,
        system: &CoupledSystem,
        z: &CoupledState,
        lambda_cmd: &DVector<f64>,
        payload_accel: &Vector6<f64>,
        learned: &[Vec<f64>],
        memory: &mut [RealizationMemory],
    ) -> Result<Vec<RealizationOutput>> {
        let n_agents = system.agents.len();
        if memory.len() != n_agents || learned.len() != n_agents {
            return Err(Error::InvalidInput(format!(
                "realization needs memory and learned terms for {n_agents} agents"
            )));
        }
        if lambda_cmd.len() != system.algebraic_dim() {
            return Err(Error::InvalidInput(format!(
                "commanded forces of length {} for {} constraints",
                lambda_cmd.len(),
                system.algebraic_dim()
            )));
        }
        let jac = system.constraint_jacobian(z);
        let bias = system.constraint_bias(z);
        let phi = system.constraints(z);
        let phi_dot = &jac * system.velocity(z);
        let alpha = system.baumgarte;
        let target = -bias - phi_dot * (2.0 * alpha) - phi * (alpha * alpha);
        let a_l = DVector::from_column_slice(payload_accel.as_slice());
        (0..n_agents)
            .map(|j| {
                let (a_agent, a_pay) = system.agent_constraint_blocks(&jac, j);
                let rows = 3 * system.contact_offset(j);
                let rhs = target.rows(rows, a_agent.nrows()) - a_pay * &a_l;
                let lambdas = system.agent_contacts(lambda_cmd, j);
                self.realize_agent(
                    &system.agents[j],
                    &z.agents[j],
                    &a_agent,
                    &rhs,
                    &lambdas,
                    &learned[j],
                    &system.gravity,
                    &mut memory[j],
                )
            })
            .collect()
    }

    /// Inputs for one agent whose constraint rows read `A (ω̇, v̇, r̈) = rhs`.
    #[allow(clippy::too_many_arguments)]
    pub fn realize_agent(
        &self,
        model: &AgentModel,
        state: &AgentState,
        a: &DMatrix<f64>,
        rhs: &DVector<f64>,
        lambdas: &[Vector3<f64>],
        learned: &[f64],
        gravity: &Vector3<f64>,
        memory: &mut RealizationMemory,
    ) -> Result<RealizationOutput> {
        let n = model.n_joints();
        let learned = if learned.is_empty() {
            vec![0.0; 6 + n]
        } else if learned.len() == 6 + n {
            learned.to_vec()
        } else {
            return Err(Error::InvalidInput(format!(
                "agent learned term has {} entries, expected {}",
                learned.len(),
                6 + n
            )));
        };
        let f_hat = Vector3::new(learned[0], learned[1], learned[2]);
        let blocks = model.mass_blocks(&state.r)?;
        let m = blocks.mass;
        let lam_sum: Vector3<f64> = lambdas.iter().sum();
        let required_force = |acc: &DVector<f64>| {
            let v_dot = Vector3::new(acc[3], acc[4], acc[5]);
            (v_dot - gravity) * m + lam_sum - f_hat
        };

        let weights = self.weights(n);
        let plan0 = weighted_min_norm(a, rhs, &DVector::zeros(6 + n), &weights)?;
        let f0 = required_force(&plan0);
        let rot_d = match desired_attitude(&f0, &state.rot) {
            Some(r) => r,
            None => memory.last.unwrap_or(state.rot),
        };
        memory.last = Some(rot_d);

        // No desired-rate feedforward: differentiating the desired attitude
        // closes a fast loop through the planned translational acceleration.
        let e_r = attitude_error(&state.rot, &rot_d);
        let w_dot_target = -e_r * self.gains.k_r - state.omega * self.gains.k_omega;
        let mut s0 = DVector::zeros(6 + n);
        s0.rows_mut(0, 3).copy_from(&w_dot_target);
        let plan = weighted_min_norm(a, rhs, &s0, &weights)?;
        let force = required_force(&plan);
        let thrust = force.dot(&(state.rot.matrix() * Vector3::z())).max(0.0);

        // Momentum rate that produces the planned (ω̇, r̈).
        let mut xi_dot = DVector::zeros(3 + n);
        xi_dot.rows_mut(0, 3).copy_from(&plan.rows(0, 3));
        xi_dot.rows_mut(3, n).copy_from(&plan.rows(6, n));
        let xi = state.xi();
        let mut p_dot = blocks.reduced() * xi_dot;
        let derivs = model.reduced_mass_derivatives(&state.r);
        for (k, dm) in derivs.iter().enumerate() {
            p_dot += dm * &xi * state.r_dot[k];
        }
        let zero_input = AgentInput {
            thrust,
            torque: Vector3::zeros(),
            joint_torque: DVector::zeros(n),
        };
        // Everything except τ, τ_r: μ×ω − Cᵀe₃u/m and ½ξ̄ᵀ∂M̄ξ̄ − M_vṙᵀe₃u/m.
        let drift = model.nominal_momentum_rate(state, &blocks, &zero_input)?;
        let contact = model.contact_generalized_force(state, lambdas);
        let mut tau = p_dot - drift + contact;
        for (k, v) in tau.iter_mut().enumerate() {
            *v -= learned[3 + k];
        }
        Ok(RealizationOutput {
            input: AgentInput {
                thrust,
                torque: Vector3::new(tau[0], tau[1], tau[2]),
                joint_torque: tau.rows(3, n).into_owned(),
            },
            desired_rot: rot_d,
            force,
            attitude_error: e_r,
            acceleration: plan,
        })
    }

    fn weights(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(6 + n, |i, _| if i < 3 { 1.0 } else { self.gains.plan_weight })
    }
}

/// `argmin (s − s₀)ᵀ W (s − s₀)` subject to `A s = b`, for diagonal `W`.
fn weighted_min_norm(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    s0: &DVector<f64>,
    weights: &DVector<f64>,
) -> Result<DVector<f64>> {
    let winv_at = DMatrix::from_fn(a.ncols(), a.nrows(), |i, k| a[(k, i)] / weights[i]);
    let gram = a * &winv_at;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularGrasp("agent constraint rows are rank deficient".into()))?;
    let y = chol.solve(&(b - a * s0));
    Ok(s0 + winv_at * y)
}

/// Thrust axis along `force`, heading kept from the current body x axis.
fn desired_attitude(force: &Vector3<f64>, current: &Rotation) -> Option<Rotation> {
    let norm = force.norm();
    if norm < 1e-9 {
        return None;
    }
    let b3 = force / norm;
    let heading = current.matrix().column(0).into_owned();
    let mut b2 = b3.cross(&heading);
    if b2.norm() < 1e-6 {
        b2 = b3.cross(&current.matrix().column(1).into_owned());
    }
    let b2 = b2.normalize();
    let b1 = b2.cross(&b3);
    Some(Rotation::from_matrix_unchecked(Matrix3::from_columns(&[b1, b2, b3])))
}
