//! Payload rigid body, rigid-grasp constraints and the coupled agent/payload
//! DAE with multiplier solves, RK4 stepping and manifold projection.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};

use crate::agent::{AgentDisturbance, AgentInput, AgentModel, AgentState};
use crate::error::{Error, Result};
use crate::liegroup::{hat, Rotation};

/// Payload inertial parameters and grasp attachments (payload frame, λ order).
#[derive(Clone, Debug, PartialEq)]
pub struct PayloadParams {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub attachments: Vec<Vector3<f64>>,
}

impl PayloadParams {
    /// 1.5 kg plate with the square attachment layout `(±0.25, ±0.15, 0)`;
    /// agent 1 holds the `x = +0.25` edge, agent 2 the `x = −0.25` edge.
    pub fn plate_default() -> Self {
        PayloadParams {
            mass: 1.5,
            inertia: Matrix3::from_diagonal(&Vector3::new(0.03, 0.05, 0.07)),
            attachments: vec![
                Vector3::new(0.25, 0.15, 0.0),
                Vector3::new(0.25, -0.15, 0.0),
                Vector3::new(-0.25, 0.15, 0.0),
                Vector3::new(-0.25, -0.15, 0.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::Configuration("payload mass must be positive".into()));
        }
        let asym = (self.inertia - self.inertia.transpose()).norm();
        if asym > 1e-12 || self.inertia.symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::Configuration(
                "payload inertia must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn gravity_force(&self, gravity: &Vector3<f64>) -> Vector3<f64> {
        gravity * self.mass
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub rot: Rotation,
    /// Body-frame angular velocity.
    pub omega: Vector3<f64>,
}

impl PayloadState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        PayloadState {
            p,
            v: Vector3::zeros(),
            rot: Rotation::identity(),
            omega: Vector3::zeros(),
        }
    }

    /// `[p, v, vec R, ω]` (18 entries, column-major `R`).
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(18);
        f.extend_from_slice(self.p.as_slice());
        f.extend_from_slice(self.v.as_slice());
        f.extend_from_slice(self.rot.matrix().as_slice());
        f.extend_from_slice(self.omega.as_slice());
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadDerivative {
    pub p_dot: Vector3<f64>,
    pub v_dot: Vector3<f64>,
    pub rot_dot: Matrix3<f64>,
    pub omega_dot: Vector3<f64>,
}

/// Unknown payload force (inertial) and torque (body) as a function of state.
#[derive(Clone, Debug, PartialEq)]
pub struct PayloadDisturbance {
    pub drag: f64,
    pub force_bias: Vector3<f64>,
    pub torque_bias: Vector3<f64>,
}

impl PayloadDisturbance {
    pub fn zero() -> Self {
        PayloadDisturbance {
            drag: 0.0,
            force_bias: Vector3::zeros(),
            torque_bias: Vector3::zeros(),
        }
    }

    pub fn evaluate(&self, state: &PayloadState) -> (Vector3<f64>, Vector3<f64>) {
        (self.force_bias - state.v * self.drag, self.torque_bias)
    }
}

/// `G(R_L)`: stacked contact forces to the payload wrench `[F; τ]`, torque in
/// the inertial frame about the payload origin.
pub fn grasp_matrix(rot: &Rotation, attachments: &[Vector3<f64>]) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(6, 3 * attachments.len());
    for (i, c) in attachments.iter().enumerate() {
        g.view_mut((0, 3 * i), (3, 3)).copy_from(&Matrix3::identity());
        g.view_mut((3, 3 * i), (3, 3)).copy_from(&hat(&(rot.matrix() * c)));
    }
    g
}

/// Net wrench summed contact by contact: `[Σλ; Σ (R_L c) × λ]`.
pub fn net_wrench(rot: &Rotation, attachments: &[Vector3<f64>], lambda: &DVector<f64>) -> Vector6<f64> {
    let mut w = Vector6::zeros();
    for (i, c) in attachments.iter().enumerate() {
        let f = contact_force(lambda, i);
        let arm = rot.matrix() * c;
        let tau = arm.cross(&f);
        for k in 0..3 {
            w[k] += f[k];
            w[3 + k] += tau[k];
        }
    }
    w
}

pub fn contact_force(lambda: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(lambda[3 * i], lambda[3 * i + 1], lambda[3 * i + 2])
}

/// Payload rigid-body dynamics driven by the contact forces.
pub fn payload_rhs(
    params: &PayloadParams,
    state: &PayloadState,
    lambdas: &[Vector3<f64>],
    disturbance: &PayloadDisturbance,
    gravity: &Vector3<f64>,
) -> PayloadDerivative {
    let (f_uk, tau_uk) = disturbance.evaluate(state);
    let rt = state.rot.matrix().transpose();
    let mut force = params.gravity_force(gravity) + f_uk;
    let mut torque = tau_uk - state.omega.cross(&(params.inertia * state.omega));
    for (c, lam) in params.attachments.iter().zip(lambdas) {
        force += lam;
        torque += c.cross(&(rt * lam));
    }
    let omega_dot = params
        .inertia
        .try_inverse()
        .expect("validated payload inertia")
        * torque;
    PayloadDerivative {
        p_dot: state.v,
        v_dot: force / params.mass,
        rot_dot: state.rot.matrix() * hat(&state.omega),
        omega_dot,
    }
}

/// Full team state: the differential variables of the DAE.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    pub agents: Vec<AgentState>,
    pub payload: PayloadState,
}

/// Outcome of one multiplier solve.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactSolution {
    /// Forces exerted by the agents on the payload, λ order.
    pub lambda: DVector<f64>,
    /// Squared ratio of extreme Cholesky pivots.
    pub condition_estimate: f64,
    pub least_squares: bool,
}

/// Agents, payload, disturbances and stabilization settings of the coupled DAE.
#[derive(Clone, Debug)]
pub struct CoupledSystem {
    pub agents: Vec<AgentModel>,
    pub payload: PayloadParams,
    pub agent_disturbances: Vec<AgentDisturbance>,
    pub payload_disturbance: PayloadDisturbance,
    pub gravity: Vector3<f64>,
    /// Baumgarte rate α in 1/s.
    pub baumgarte: f64,
}

const CONDITION_LIMIT: f64 = 1e12;
const SOLVE_RESIDUAL: f64 = 1e-10;
const NEWTON_ITERATIONS: usize = 50;
const NEWTON_TOL: f64 = 1e-12;

impl CoupledSystem {
    pub fn new(agents: Vec<AgentModel>, payload: PayloadParams) -> Result<Self> {
        let n_agents = agents.len();
        let system = CoupledSystem {
            agent_disturbances: agents.iter().map(|a| AgentDisturbance::zero(a.n_joints())).collect(),
            agents,
            payload,
            payload_disturbance: PayloadDisturbance::zero(),
            gravity: crate::agent::gravity_vector(),
            baumgarte: 20.0,
        };
        if n_agents == 0 {
            return Err(Error::Configuration("at least one agent is required".into()));
        }
        system.validate()?;
        Ok(system)
    }

    pub fn validate(&self) -> Result<()> {
        self.payload.validate()?;
        for a in &self.agents {
            a.validate()?;
        }
        let contacts: usize = self.agents.iter().map(|a| a.n_joints()).sum();
        if contacts != self.payload.attachments.len() {
            return Err(Error::Configuration(format!(
                "{} arms but {} payload attachments",
                contacts,
                self.payload.attachments.len()
            )));
        }
        if self.agent_disturbances.len() != self.agents.len() {
            return Err(Error::Configuration("one disturbance per agent is required".into()));
        }
        if !(self.baumgarte >= 0.0) {
            return Err(Error::Configuration("Baumgarte rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_contacts(&self) -> usize {
        self.payload.attachments.len()
    }

    /// Index of the first contact of agent `j` in λ order.
    pub fn contact_offset(&self, j: usize) -> usize {
        self.agents[..j].iter().map(|a| a.n_joints()).sum()
    }

    fn agent_velocity_offset(&self, j: usize) -> usize {
        self.agents[..j].iter().map(|a| 6 + a.n_joints()).sum()
    }

    /// Length of the stacked velocity `(ω, v, ṙ)_j…, (v_L, ω_L)`.
    pub fn velocity_dim(&self) -> usize {
        self.agent_velocity_offset(self.agents.len()) + 6
    }

    /// Dimension of the differential state on `SO(3)`: `12(N+1) + 2Σn_r`.
    pub fn differential_dim(&self) -> usize {
        12 * (self.agents.len() + 1) + 2 * self.agents.iter().map(|a| a.n_joints()).sum::<usize>()
    }

    pub fn algebraic_dim(&self) -> usize {
        3 * self.n_contacts()
    }

    /// Length of the flat integration vector (rotations stored as 9 entries).
    pub fn packed_dim(&self) -> usize {
        self.agents.iter().map(|a| 18 + 2 * a.n_joints()).sum::<usize>() + 18
    }

    /// Stacked `φ_{j,b} = p_{j,b} − (p_L + R_L c_{j,b})`.
    pub fn constraints(&self, z: &CoupledState) -> DVector<f64> {
        let mut phi = DVector::zeros(self.algebraic_dim());
        for (j, (model, state)) in self.agents.iter().zip(&z.agents).enumerate() {
            let base = self.contact_offset(j);
            for b in 0..model.n_joints() {
                let i = base + b;
                let target = z.payload.p + z.payload.rot.matrix() * self.payload.attachments[i];
                let e = model.contact_point(state, b) - target;
                phi.rows_mut(3 * i, 3).copy_from(&e);
            }
        }
        phi
    }

    /// Stacked velocity `(ω, v, ṙ)` per agent followed by `(v_L, ω_L)`.
    pub fn velocity(&self, z: &CoupledState) -> DVector<f64> {
        let mut out = DVector::zeros(self.velocity_dim());
        for (j, state) in z.agents.iter().enumerate() {
            let o = self.agent_velocity_offset(j);
            let n = state.r.len();
            out.rows_mut(o, 3).copy_from(&state.omega);
            out.rows_mut(o + 3, 3).copy_from(&state.v);
            out.rows_mut(o + 6, n).copy_from(&state.r_dot);
        }
        let o = self.velocity_dim() - 6;
        out.rows_mut(o, 3).copy_from(&z.payload.v);
        out.rows_mut(o + 3, 3).copy_from(&z.payload.omega);
        out
    }

    /// Writes a stacked velocity back into the state and refreshes momenta.
    pub fn set_velocity(&self, z: &mut CoupledState, vel: &DVector<f64>) {
        for (j, (model, state)) in self.agents.iter().zip(z.agents.iter_mut()).enumerate() {
            let o = self.agent_velocity_offset(j);
            let n = model.n_joints();
            state.omega = Vector3::new(vel[o], vel[o + 1], vel[o + 2]);
            state.v = Vector3::new(vel[o + 3], vel[o + 4], vel[o + 5]);
            state.r_dot = vel.rows(o + 6, n).into_owned();
            state.sync_momenta(model);
        }
        let o = self.velocity_dim() - 6;
        z.payload.v = Vector3::new(vel[o], vel[o + 1], vel[o + 2]);
        z.payload.omega = Vector3::new(vel[o + 3], vel[o + 4], vel[o + 5]);
    }

    /// Constraint Jacobian `DΦ` with `Φ̇ = DΦ · velocity`.
    pub fn constraint_jacobian(&self, z: &CoupledState) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.algebraic_dim(), self.velocity_dim());
        let pay = self.velocity_dim() - 6;
        let rl = z.payload.rot.matrix();
        let rl_dyn = DMatrix::from_column_slice(3, 3, rl.as_slice());
        for (j, (model, state)) in self.agents.iter().zip(&z.agents).enumerate() {
            let o = self.agent_velocity_offset(j);
            let n = model.n_joints();
            let rm = DMatrix::from_column_slice(3, 3, state.rot.matrix().as_slice());
            for b in 0..n {
                let i = self.contact_offset(j) + b;
                let row = 3 * i;
                let d = model.contact_offset(&state.r, b);
                jac.view_mut((row, o), (3, 3)).copy_from(&(-state.rot.matrix() * hat(&d)));
                jac.view_mut((row, o + 3), (3, 3)).copy_from(&Matrix3::identity());
                jac.view_mut((row, o + 6), (3, n))
                    .copy_from(&(&rm * model.contact_offset_jacobian(&state.r, b)));
                jac.view_mut((row, pay), (3, 3)).copy_from(&(-Matrix3::identity()));
                let c = &self.payload.attachments[i];
                jac.view_mut((row, pay + 3), (3, 3)).copy_from(&(&rl_dyn * hat(c)));
            }
        }
        jac
    }

    /// Velocity-quadratic term `b` with `Φ̈ = DΦ · acceleration + b`.
    pub fn constraint_bias(&self, z: &CoupledState) -> DVector<f64> {
        let mut bias = DVector::zeros(self.algebraic_dim());
        let rl = z.payload.rot.matrix();
        let wl = z.payload.omega;
        for (j, (model, state)) in self.agents.iter().zip(&z.agents).enumerate() {
            let w = state.omega;
            for b in 0..model.n_joints() {
                let i = self.contact_offset(j) + b;
                let d = model.contact_offset(&state.r, b);
                let dr = model.contact_offset_jacobian(&state.r, b) * &state.r_dot;
                let dr = Vector3::new(dr[0], dr[1], dr[2]);
                let curv = model.contact_offset_curvature(&state.r, &state.r_dot, b);
                let agent = state.rot.matrix() * (w.cross(&w.cross(&d)) + w.cross(&dr) * 2.0 + curv);
                let c = &self.payload.attachments[i];
                let pay = rl * wl.cross(&wl.cross(c));
                bias.rows_mut(3 * i, 3).copy_from(&(agent - pay));
            }
        }
        bias
    }

    /// `Φ̇ = DΦ · velocity`.
    pub fn constraint_rate(&self, z: &CoupledState) -> DVector<f64> {
        self.constraint_jacobian(z) * self.velocity(z)
    }

    /// Block-diagonal inverse generalized mass in velocity coordinates.
    pub fn inverse_mass(&self, z: &CoupledState) -> Result<DMatrix<f64>> {
        let nv = self.velocity_dim();
        let mut minv = DMatrix::zeros(nv, nv);
        for (j, (model, state)) in self.agents.iter().zip(&z.agents).enumerate() {
            let o = self.agent_velocity_offset(j);
            let n = model.n_joints();
            let blocks = model.mass_blocks_unchecked(&state.r);
            let inv = blocks
                .reduced()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite(format!("reduced mass matrix of agent {}", j + 1)))?
                .inverse();
            let idx: Vec<usize> = (0..3).chain(6..6 + n).collect();
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    minv[(o + ia, o + ib)] = inv[(a, b)];
                }
            }
            for k in 3..6 {
                minv[(o + k, o + k)] = 1.0 / blocks.mass;
            }
        }
        let o = nv - 6;
        for k in 0..3 {
            minv[(o + k, o + k)] = 1.0 / self.payload.mass;
        }
        let jinv = self
            .payload
            .inertia
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("payload inertia".into()))?;
        minv.view_mut((o + 3, o + 3), (3, 3)).copy_from(&jinv);
        Ok(minv)
    }

    /// Accelerations in velocity coordinates with all contact forces removed.
    pub fn free_acceleration(&self, z: &CoupledState, inputs: &[AgentInput]) -> Result<DVector<f64>> {
        let nv = self.velocity_dim();
        let mut acc = DVector::zeros(nv);
        for (j, (model, state)) in self.agents.iter().zip(&z.agents).enumerate() {
            let o = self.agent_velocity_offset(j);
            let n = model.n_joints();
            let none = vec![Vector3::zeros(); n];
            let d = model.rhs(state, &inputs[j], &none, &self.agent_disturbances[j], &self.gravity)?;
            let xi_dot = self.reduced_acceleration(model, state, &d.mu_dot, &d.nu_dot)?;
            acc.rows_mut(o, 3).copy_from(&xi_dot.rows(0, 3));
            acc.rows_mut(o + 3, 3).copy_from(&d.v_dot);
            acc.rows_mut(o + 6, n).copy_from(&xi_dot.rows(3, n));
        }
        let none = vec![Vector3::zeros(); self.n_contacts()];
        let d = payload_rhs(&self.payload, &z.payload, &none, &self.payload_disturbance, &self.gravity);
        acc.rows_mut(nv - 6, 3).copy_from(&d.v_dot);
        acc.rows_mut(nv - 3, 3).copy_from(&d.omega_dot);
        Ok(acc)
    }

    /// `ξ̄̇ = M̄⁻¹((μ̇, ν̇) − Ṁ̄ ξ̄)`.
    pub fn reduced_acceleration(
        &self,
        model: &AgentModel,
        state: &AgentState,
        mu_dot: &Vector3<f64>,
        nu_dot: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = model.n_joints();
        let mbar = model.mass_blocks_unchecked(&state.r).reduced();
        let xi = state.xi();
        let mut p_dot = DVector::zeros(3 + n);
        p_dot.rows_mut(0, 3).copy_from(mu_dot);
        p_dot.rows_mut(3, n).copy_from(nu_dot);
        for (k, dm) in model.reduced_mass_derivatives(&state.r).iter().enumerate() {
            p_dot -= dm * &xi * state.r_dot[k];
        }
        let chol = mbar
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("reduced mass matrix".into()))?;
        Ok(chol.solve(&p_dot))
    }

    /// Multipliers from the Baumgarte-stabilized acceleration constraint
    /// `Φ̈ + 2αΦ̇ + α²Φ = 0`.
    pub fn solve_contact_forces(&self, z: &CoupledState, inputs: &[AgentInput]) -> Result<ContactSolution> {
        self.solve_contact_forces_with(z, inputs, self.baumgarte)
    }

    pub fn solve_contact_forces_with(
        &self,
        z: &CoupledState,
        inputs: &[AgentInput],
        alpha: f64,
    ) -> Result<ContactSolution> {
        if inputs.len() != self.agents.len() {
            return Err(Error::InvalidInput(format!(
                "{} agent inputs for {} agents",
                inputs.len(),
                self.agents.len()
            )));
        }
        let jac = self.constraint_jacobian(z);
        let minv = self.inverse_mass(z)?;
        let a_free = self.free_acceleration(z, inputs)?;
        let vel = self.velocity(z);
        let phi = self.constraints(z);
        let phi_dot = &jac * &vel;
        let rhs = &jac * a_free + self.constraint_bias(z) + phi_dot * (2.0 * alpha) + phi * (alpha * alpha);
        let mut a = &jac * &minv * jac.transpose();
        let at = a.transpose();
        a = (a + at) * 0.5;
        solve_spd(&a, &rhs)
    }

    /// Flat derivative of the packed state together with the multipliers used.
    pub fn derivative(&self, z: &CoupledState, inputs: &[AgentInput]) -> Result<(DVector<f64>, ContactSolution)> {
        let sol = self.solve_contact_forces(z, inputs)?;
        let lambdas: Vec<Vector3<f64>> = (0..self.n_contacts()).map(|i| contact_force(&sol.lambda, i)).collect();
        let mut out = DVector::zeros(self.packed_dim());
        let mut o = 0;
        for (j, (model, state)) in self.agents.iter().zip(&z.agents).enumerate() {
            let n = model.n_joints();
            let base = self.contact_offset(j);
            let d = model.rhs(
                state,
                &inputs[j],
                &lambdas[base..base + n],
                &self.agent_disturbances[j],
                &self.gravity,
            )?;
            out.rows_mut(o, 9).copy_from_slice(d.rot_dot.as_slice());
            out.rows_mut(o + 9, 3).copy_from(&d.x_dot);
            out.rows_mut(o + 12, n).copy_from(&d.r_dot);
            out.rows_mut(o + 12 + n, 3).copy_from(&d.v_dot);
            out.rows_mut(o + 15 + n, 3).copy_from(&d.mu_dot);
            out.rows_mut(o + 18 + n, n).copy_from(&d.nu_dot);
            o += 18 + 2 * n;
        }
        let d = payload_rhs(&self.payload, &z.payload, &lambdas, &self.payload_disturbance, &self.gravity);
        out.rows_mut(o, 3).copy_from(&d.p_dot);
        out.rows_mut(o + 3, 3).copy_from(&d.v_dot);
        out.rows_mut(o + 6, 9).copy_from_slice(d.rot_dot.as_slice());
        out.rows_mut(o + 15, 3).copy_from(&d.omega_dot);
        Ok((out, sol))
    }

    pub fn pack(&self, z: &CoupledState) -> DVector<f64> {
        let mut out = DVector::zeros(self.packed_dim());
        let mut o = 0;
        for state in &z.agents {
            let n = state.r.len();
            out.rows_mut(o, 9).copy_from_slice(state.rot.matrix().as_slice());
            out.rows_mut(o + 9, 3).copy_from(&state.x);
            out.rows_mut(o + 12, n).copy_from(&state.r);
            out.rows_mut(o + 12 + n, 3).copy_from(&state.v);
            out.rows_mut(o + 15 + n, 3).copy_from(&state.mu);
            out.rows_mut(o + 18 + n, n).copy_from(&state.nu);
            o += 18 + 2 * n;
        }
        out.rows_mut(o, 3).copy_from(&z.payload.p);
        out.rows_mut(o + 3, 3).copy_from(&z.payload.v);
        out.rows_mut(o + 6, 9).copy_from_slice(z.payload.rot.matrix().as_slice());
        out.rows_mut(o + 15, 3).copy_from(&z.payload.omega);
        out
    }

    /// Inverse of [`pack`](Self::pack); velocities are recovered from momenta.
    /// Rotations are taken as stored unless `renormalize` is set.
    pub fn unpack(&self, y: &DVector<f64>, renormalize: bool) -> Result<CoupledState> {
        let v3 = |o: usize| Vector3::new(y[o], y[o + 1], y[o + 2]);
        let rot = |o: usize| {
            let r = Rotation::from_matrix_unchecked(Matrix3::from_column_slice(&y.as_slice()[o..o + 9]));
            if renormalize {
                r.renormalized()
            } else {
                r
            }
        };
        let mut agents = Vec::with_capacity(self.agents.len());
        let mut o = 0;
        for model in &self.agents {
            let n = model.n_joints();
            let mut s = AgentState {
                rot: rot(o),
                x: v3(o + 9),
                r: y.rows(o + 12, n).into_owned(),
                omega: Vector3::zeros(),
                v: v3(o + 12 + n),
                r_dot: DVector::zeros(n),
                mu: v3(o + 15 + n),
                nu: y.rows(o + 18 + n, n).into_owned(),
            };
            s.sync_velocities(model)?;
            agents.push(s);
            o += 18 + 2 * n;
        }
        let payload = PayloadState {
            p: v3(o),
            v: v3(o + 3),
            rot: rot(o + 6),
            omega: v3(o + 15),
        };
        Ok(CoupledState { agents, payload })
    }

    /// One classical RK4 step with inputs held constant; multipliers are
    /// re-solved at every stage and rotations re-orthonormalized at the end.
    pub fn step(&self, z: &CoupledState, inputs: &[AgentInput], h: f64) -> Result<CoupledState> {
        let y0 = self.pack(z);
        let (k1, _) = self.derivative(z, inputs)?;
        let z2 = self.unpack(&(&y0 + &k1 * (0.5 * h)), false)?;
        let (k2, _) = self.derivative(&z2, inputs)?;
        let z3 = self.unpack(&(&y0 + &k2 * (0.5 * h)), false)?;
        let (k3, _) = self.derivative(&z3, inputs)?;
        let z4 = self.unpack(&(&y0 + &k3 * h), false)?;
        let (k4, _) = self.derivative(&z4, inputs)?;
        let y1 = y0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        self.unpack(&y1, true)
    }

    /// Newton projection of the agent poses and joints onto `Φ = 0`, payload held fixed.
    pub fn project_positions(&self, z: &mut CoupledState) -> Result<()> {
        let mut residual = self.constraints(z).norm();
        for _ in 0..NEWTON_ITERATIONS {
            if residual < NEWTON_TOL {
                return Ok(());
            }
            let phi = self.constraints(z);
            let jac = self.agent_columns(&self.constraint_jacobian(z));
            let delta = -min_norm_solve(&jac, &phi)?;
            let mut o = 0;
            for (model, state) in self.agents.iter().zip(z.agents.iter_mut()) {
                let n = model.n_joints();
                let dtheta = Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
                state.rot = state.rot.perturbed(&dtheta).renormalized();
                state.x += Vector3::new(delta[o + 3], delta[o + 4], delta[o + 5]);
                state.r += delta.rows(o + 6, n);
                o += 6 + n;
            }
            residual = self.constraints(z).norm();
        }
        if residual < NEWTON_TOL.max(1e-10) {
            Ok(())
        } else {
            Err(Error::InfeasibleGeometry { residual })
        }
    }

    /// Minimum-norm change of the agent velocities enforcing `Φ̇ = 0` with the
    /// payload velocity held fixed.
    pub fn project_agent_velocities(&self, z: &mut CoupledState) -> Result<()> {
        let jac = self.constraint_jacobian(z);
        let mut vel = self.velocity(z);
        let delta = min_norm_solve(&self.agent_columns(&jac), &(&jac * &vel))?;
        let na = self.velocity_dim() - 6;
        let mut agent_part = vel.rows_mut(0, na);
        agent_part -= delta;
        self.set_velocity(z, &vel);
        Ok(())
    }

    /// Mass-weighted projection of all velocities onto `Φ̇ = 0`.
    pub fn project_velocities(&self, z: &mut CoupledState) -> Result<()> {
        let jac = self.constraint_jacobian(z);
        let minv = self.inverse_mass(z)?;
        let vel = self.velocity(z);
        let a = &jac * &minv * jac.transpose();
        let sol = solve_spd(&a, &(&jac * &vel))?;
        let corrected = &vel - &minv * jac.transpose() * sol.lambda;
        self.set_velocity(z, &corrected);
        Ok(())
    }

    /// Post-step manifold projection: positions by Newton, then velocities.
    pub fn project(&self, z: &mut CoupledState) -> Result<()> {
        self.project_positions(z)?;
        self.project_velocities(z)
    }

    /// Consistent initial state from a guess: agent poses and joints by Newton,
    /// agent velocities by a minimum-norm solve of `Φ̇ = 0`; the payload state
    /// is kept as given.
    pub fn consistent_init(&self, guess: &CoupledState) -> Result<CoupledState> {
        let mut z = guess.clone();
        self.project_positions(&mut z)?;
        self.project_agent_velocities(&mut z)?;
        Ok(z)
    }

    fn agent_columns(&self, jac: &DMatrix<f64>) -> DMatrix<f64> {
        jac.columns(0, self.velocity_dim() - 6).into_owned()
    }

    /// Agents in their rest configuration, rigidly attached to the payload:
    /// `R_j = R_L`, `r_j = 0`, arm tips centred on the agent's attachments and
    /// velocities of the rigid motion of the payload.
    pub fn rigid_layout(&self, payload: &PayloadState) -> Result<CoupledState> {
        let rl = payload.rot.matrix();
        let mut agents = Vec::with_capacity(self.agents.len());
        for (j, model) in self.agents.iter().enumerate() {
            let n = model.n_joints();
            let base = self.contact_offset(j);
            let r = DVector::zeros(n);
            let grasp: Vector3<f64> =
                self.payload.attachments[base..base + n].iter().sum::<Vector3<f64>>() / n as f64;
            let tips: Vector3<f64> = (0..n).map(|b| model.contact_offset(&r, b)).sum::<Vector3<f64>>() / n as f64;
            // Centre of mass in payload coordinates.
            let com = grasp - tips;
            let x = payload.p + rl * com;
            let v = payload.v + rl * payload.omega.cross(&com);
            agents.push(model.state(payload.rot, x, r, payload.omega, v, DVector::zeros(n))?);
        }
        Ok(CoupledState {
            agents,
            payload: payload.clone(),
        })
    }

    /// Total linear momentum of agents and payload.
    pub fn linear_momentum(&self, z: &CoupledState) -> Vector3<f64> {
        let agents: Vector3<f64> = self
            .agents
            .iter()
            .zip(&z.agents)
            .map(|(m, s)| s.v * m.total_mass())
            .sum();
        agents + z.payload.v * self.payload.mass
    }

    /// Contact forces of agent `j` as 3-vectors.
    pub fn agent_contacts(&self, lambda: &DVector<f64>, j: usize) -> Vec<Vector3<f64>> {
        let base = self.contact_offset(j);
        (0..self.agents[j].n_joints()).map(|b| contact_force(lambda, base + b)).collect()
    }

    /// Per-agent slice of the constraint rows: `(agent columns, payload columns)`.
    pub fn agent_constraint_blocks(&self, jac: &DMatrix<f64>, j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.agents[j].n_joints();
        let rows = 3 * self.contact_offset(j);
        let o = self.agent_velocity_offset(j);
        (
            jac.view((rows, o), (3 * n, 6 + n)).into_owned(),
            jac.view((rows, self.velocity_dim() - 6), (3 * n, 6)).into_owned(),
        )
    }
}

/// Solves `A x = b` for symmetric positive semi-definite `A`: Cholesky with a
/// residual refinement; least squares when the pivots indicate ill
/// conditioning; singular-grasp error on rank loss.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<ContactSolution> {
    let scale = b.norm().max(1e-300);
    if let Some(chol) = a.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let condition = (hi / lo).powi(2);
        if condition <= CONDITION_LIMIT {
            let mut x = chol.solve(b);
            let r = b - a * &x;
            if r.norm() > SOLVE_RESIDUAL * scale {
                x += chol.solve(&r);
            }
            return Ok(ContactSolution {
                lambda: x,
                condition_estimate: condition,
                least_squares: false,
            });
        }
        warn!("contact system ill-conditioned (estimate {condition:.3e}); using least squares");
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-14 {
        return Err(Error::SingularGrasp(format!(
            "singular values span [{smin:.3e}, {smax:.3e}]"
        )));
    }
    let x = svd
        .solve(b, smax * 1e-14)
        .map_err(|e| Error::SingularGrasp(e.to_string()))?;
    Ok(ContactSolution {
        lambda: x,
        condition_estimate: (smax / smin).powi(2),
        least_squares: true,
    })
}

/// `x = Jᵀ(JJᵀ)⁻¹ y`, the minimum-norm solution of `J x = y`.
fn min_norm_solve(jac: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = jac * jac.transpose();
    let sol = solve_spd(&gram, y)?;
    Ok(jac.transpose() * sol.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::gravity_vector;
    use crate::liegroup::exp_so3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn system() -> CoupledSystem {
        CoupledSystem::new(
            vec![AgentModel::two_arm_default(), AgentModel::two_arm_default()],
            PayloadParams::plate_default(),
        )
        .unwrap()
    }

    fn moving_payload() -> PayloadState {
        PayloadState {
            p: Vector3::new(0.1, -0.2, 1.0),
            v: Vector3::new(0.2, 0.1, -0.1),
            rot: exp_so3(&Vector3::new(0.1, 0.05, 0.3)),
            omega: Vector3::new(0.2, -0.3, 0.4),
        }
    }

    fn hover_inputs(sys: &CoupledSystem) -> Vec<AgentInput> {
        sys.agents
            .iter()
            .map(|m| AgentInput {
                thrust: (m.total_mass() + sys.payload.mass / 2.0) * 9.81,
                torque: Vector3::zeros(),
                joint_torque: DVector::zeros(2),
            })
            .collect()
    }

    /// Rigid layout perturbed with joint motion, projected onto the manifold.
    fn excited_state(sys: &CoupledSystem) -> CoupledState {
        let mut z = sys.rigid_layout(&moving_payload()).unwrap();
        z.agents[0].r_dot = DVector::from_column_slice(&[0.3, -0.2]);
        z.agents[1].omega += Vector3::new(0.1, 0.2, 0.0);
        sys.consistent_init(&z).unwrap()
    }

    #[test]
    fn rigid_layout_is_consistent() {
        let sys = system();
        let z = sys.rigid_layout(&PayloadState::at_rest(Vector3::new(0.0, 0.0, 1.0))).unwrap();
        assert!(sys.constraints(&z).norm() < 1e-15);
        let again = sys.consistent_init(&z).unwrap();
        assert!((sys.pack(&again) - sys.pack(&z)).amax() < 1e-14);
        let z = sys.rigid_layout(&moving_payload()).unwrap();
        assert!(sys.constraints(&z).norm() < 1e-14);
        assert!(sys.constraint_rate(&z).norm() < 1e-14);
    }

    #[test]
    fn dimensions() {
        let sys = system();
        let z = sys.rigid_layout(&moving_payload()).unwrap();
        assert_eq!(sys.constraints(&z).len(), 12);
        assert_eq!(grasp_matrix(&z.payload.rot, &sys.payload.attachments).shape(), (6, 12));
        assert_eq!(sys.differential_dim(), 44);
        assert_eq!(sys.algebraic_dim(), 12);
    }

    #[test]
    fn payload_translation_shifts_constraints() {
        let sys = system();
        let mut z = sys.rigid_layout(&moving_payload()).unwrap();
        let d = Vector3::new(0.3, -0.1, 0.2);
        z.payload.p += d;
        let phi = sys.constraints(&z);
        for i in 0..4 {
            assert_relative_eq!(contact_force(&phi, i), -d, epsilon = 1e-14);
        }
    }

    #[test]
    fn static_bias_vanishes() {
        let sys = system();
        let z = sys.rigid_layout(&PayloadState::at_rest(Vector3::zeros())).unwrap();
        assert_eq!(sys.constraint_bias(&z).norm(), 0.0);
    }

    #[test]
    fn grasp_matrix_symmetric_lift() {
        let att = PayloadParams::plate_default().attachments;
        let g = grasp_matrix(&Rotation::identity(), &att);
        let lam = DVector::from_fn(12, |i, _| if i % 3 == 2 { 2.5 } else { 0.0 });
        let w = g * lam;
        assert_relative_eq!(w, DVector::from_column_slice(&[0.0, 0.0, 10.0, 0.0, 0.0, 0.0]), epsilon = 1e-14);
        let g = grasp_matrix(&Rotation::identity(), &[Vector3::zeros()]);
        let mut expected = DMatrix::zeros(6, 3);
        expected.view_mut((0, 0), (3, 3)).fill_with_identity();
        assert_eq!(g, expected);
    }

    #[test]
    fn payload_free_fall_and_hover() {
        let params = PayloadParams::plate_default();
        let s = PayloadState { omega: Vector3::new(0.3, -0.2, 1.0), ..PayloadState::at_rest(Vector3::zeros()) };
        let none = vec![Vector3::zeros(); 4];
        let d = payload_rhs(&params, &s, &none, &PayloadDisturbance::zero(), &gravity_vector());
        assert_eq!(d.v_dot, gravity_vector());
        let j = params.inertia;
        let expected = -j.try_inverse().unwrap() * s.omega.cross(&(j * s.omega));
        assert_relative_eq!(d.omega_dot, expected, epsilon = 1e-14);

        let share = vec![Vector3::new(0.0, 0.0, params.mass * 9.81 / 4.0); 4];
        let rest = PayloadState::at_rest(Vector3::zeros());
        let d = payload_rhs(&params, &rest, &share, &PayloadDisturbance::zero(), &gravity_vector());
        assert!(d.v_dot.norm() < 1e-14 && d.omega_dot.norm() < 1e-14);
    }

    #[test]
    fn payload_angular_momentum_conserved() {
        let params = PayloadParams::plate_default();
        let mut s = PayloadState { omega: Vector3::new(1.0, 2.0, -0.5), ..PayloadState::at_rest(Vector3::zeros()) };
        let none = vec![Vector3::zeros(); 4];
        let h0 = (s.rot.matrix() * params.inertia * s.omega).norm();
        let zero = PayloadDisturbance::zero();
        let f = |s: &PayloadState| payload_rhs(&params, s, &none, &zero, &Vector3::zeros()).omega_dot;
        let h = 1e-3;
        for _ in 0..2000 {
            let k1 = f(&s);
            let k2 = f(&PayloadState { omega: s.omega + k1 * (h / 2.0), ..s.clone() });
            let k3 = f(&PayloadState { omega: s.omega + k2 * (h / 2.0), ..s.clone() });
            let k4 = f(&PayloadState { omega: s.omega + k3 * h, ..s.clone() });
            s.omega += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        // Body-frame |Jω| is invariant for torque-free motion.
        assert_relative_eq!((params.inertia * s.omega).norm(), h0, epsilon = 1e-9);
    }

    #[test]
    fn wrench_identity() {
        let sys = system();
        let rot = exp_so3(&Vector3::new(0.4, -0.3, 1.1));
        let lam = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin() * 3.0);
        let g = grasp_matrix(&rot, &sys.payload.attachments) * &lam;
        let w = net_wrench(&rot, &sys.payload.attachments, &lam);
        assert!((g - DVector::from_column_slice(w.as_slice())).amax() < 1e-12);
        // The body torque in the payload equations equals Rᵀ of the inertial one.
        let body: Vector3<f64> = sys
            .payload
            .attachments
            .iter()
            .enumerate()
            .map(|(i, c)| c.cross(&(rot.matrix().transpose() * contact_force(&lam, i))))
            .sum();
        assert_relative_eq!(rot.matrix() * body, Vector3::new(w[3], w[4], w[5]), epsilon = 1e-12);
    }

    /// Dense saddle-point system `[M DΦᵀ; DΦ 0]` assembled from explicit
    /// generalized forces, solved by LU.
    fn dense_kkt(sys: &CoupledSystem, z: &CoupledState, inputs: &[AgentInput], alpha: f64) -> DVector<f64> {
        let nv = sys.velocity_dim();
        let nc = sys.algebraic_dim();
        let minv = sys.inverse_mass(z).unwrap();
        let m = minv.clone().try_inverse().unwrap();
        let f = &m * sys.free_acceleration(z, inputs).unwrap();
        let jac = sys.constraint_jacobian(z);
        let mut k = DMatrix::zeros(nv + nc, nv + nc);
        k.view_mut((0, 0), (nv, nv)).copy_from(&m);
        k.view_mut((0, nv), (nv, nc)).copy_from(&jac.transpose());
        k.view_mut((nv, 0), (nc, nv)).copy_from(&jac);
        let mut rhs = DVector::zeros(nv + nc);
        rhs.rows_mut(0, nv).copy_from(&f);
        let stab = sys.constraint_bias(z) + sys.constraint_rate(z) * (2.0 * alpha) + sys.constraints(z) * (alpha * alpha);
        rhs.rows_mut(nv, nc).copy_from(&(-stab));
        let sol = k.lu().solve(&rhs).unwrap();
        sol.rows(nv, nc).into_owned()
    }

    #[test]
    fn hover_multipliers_match_dense_kkt() {
        let sys = system();
        let z = sys.rigid_layout(&PayloadState::at_rest(Vector3::new(0.0, 0.0, 1.0))).unwrap();
        let inputs = hover_inputs(&sys);
        let sol = sys.solve_contact_forces(&z, &inputs).unwrap();
        let oracle = dense_kkt(&sys, &z, &inputs, sys.baumgarte);
        assert!((&sol.lambda - &oracle).amax() < 1e-9);
        // Vertical balance of the payload with the resulting acceleration.
        let (deriv, _) = sys.derivative(&z, &inputs).unwrap();
        let az = deriv[deriv.len() - 18 + 5];
        let lz: f64 = (0..4).map(|i| sol.lambda[3 * i + 2]).sum();
        assert_relative_eq!(lz, sys.payload.mass * (9.81 + az), epsilon = 1e-9);
        // Mirror symmetry of the layout: diagonal contacts share equal lift.
        assert_relative_eq!(sol.lambda[2], sol.lambda[11], epsilon = 1e-9);
        assert_relative_eq!(sol.lambda[5], sol.lambda[8], epsilon = 1e-9);
    }

    #[test]
    fn baumgarte_inert_on_manifold() {
        let sys = system();
        let z = excited_state(&sys);
        let inputs = hover_inputs(&sys);
        let a = sys.solve_contact_forces_with(&z, &inputs, 20.0).unwrap();
        let b = sys.solve_contact_forces_with(&z, &inputs, 40.0).unwrap();
        assert!((a.lambda - b.lambda).amax() < 1e-8);
    }

    #[test]
    fn moving_state_matches_dense_kkt() {
        let sys = system();
        let z = excited_state(&sys);
        let inputs = hover_inputs(&sys);
        let sol = sys.solve_contact_forces(&z, &inputs).unwrap();
        assert!((sol.lambda - dense_kkt(&sys, &z, &inputs, sys.baumgarte)).amax() < 1e-8);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = system();
        let z = excited_state(&sys);
        let jac = sys.constraint_jacobian(&z);
        let vel = sys.velocity(&z);
        let drift = |h: f64| {
            let zh = advance_positions(&sys, &z, h);
            ((sys.constraints(&zh) - sys.constraints(&z)) / h - &jac * &vel).norm()
        };
        let (e1, e2) = (drift(1e-4), drift(5e-5));
        assert!(e1 < 1e-3 && e2 < 0.6 * e1, "{e1} {e2}");
    }

    #[test]
    fn payload_columns_match_finite_differences() {
        let sys = system();
        let z = excited_state(&sys);
        let jac = sys.constraint_jacobian(&z);
        let h = 1e-7;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let mut zp = z.clone();
            zp.payload.rot = z.payload.rot.perturbed(&e);
            let mut zm = z.clone();
            zm.payload.rot = z.payload.rot.perturbed(&-e);
            let fd = (sys.constraints(&zp) - sys.constraints(&zm)) / (2.0 * h);
            assert!((fd - jac.column(sys.velocity_dim() - 3 + k)).amax() < 1e-7);
        }
    }

    /// Moves positions along the current velocities (exponential map for rotations).
    fn advance_positions(sys: &CoupledSystem, z: &CoupledState, h: f64) -> CoupledState {
        let mut out = z.clone();
        for (s, m) in out.agents.iter_mut().zip(&sys.agents) {
            s.rot = s.rot.perturbed(&(s.omega * h));
            s.x += s.v * h;
            s.r += &s.r_dot * h;
            s.sync_momenta(m);
        }
        out.payload.rot = z.payload.rot.perturbed(&(z.payload.omega * h));
        out.payload.p += z.payload.v * h;
        out
    }

    #[test]
    fn stabilized_constraint_acceleration() {
        let sys = system();
        let mut z = excited_state(&sys);
        // Push slightly off the manifold so the stabilization terms are active.
        z.agents[0].x += Vector3::new(1e-5, -2e-5, 1e-5);
        let inputs = hover_inputs(&sys);
        let h = 1e-4;
        let rate = |z: &CoupledState| sys.constraint_rate(z);
        let z1 = sys.step(&z, &inputs, h).unwrap();
        let z2 = sys.step(&z1, &inputs, h).unwrap();
        let phi_ddot = (rate(&z2) - rate(&z)) / (2.0 * h);
        let alpha = sys.baumgarte;
        let target = -(rate(&z1) * (2.0 * alpha)) - sys.constraints(&z1) * (alpha * alpha);
        assert!((phi_ddot - target).amax() < 1e-4);
    }

    #[test]
    fn perturbed_agents_projected() {
        let sys = system();
        let mut z = sys.rigid_layout(&moving_payload()).unwrap();
        z.agents[0].x += Vector3::new(1e-2, -1e-2, 5e-3);
        z.agents[1].x += Vector3::new(-1e-2, 0.0, 1e-2);
        let z = sys.consistent_init(&z).unwrap();
        assert!(sys.constraints(&z).norm() < 1e-10);
        assert!(sys.constraint_rate(&z).norm() < 1e-10);
        assert_eq!(z.payload, moving_payload());
    }

    #[test]
    fn equilibrium_step_is_stationary() {
        // Weightless, input-free team at rest stays at rest.
        let mut sys = system();
        sys.gravity = Vector3::zeros();
        let z = sys.rigid_layout(&PayloadState::at_rest(Vector3::zeros())).unwrap();
        let inputs = vec![AgentInput::zero(2), AgentInput::zero(2)];
        let z1 = sys.step(&z, &inputs, 1e-3).unwrap();
        assert!((sys.pack(&z1) - sys.pack(&z)).amax() < 1e-10);
    }

    #[test]
    fn linear_momentum_conserved_without_external_forces() {
        let mut sys = system();
        sys.gravity = Vector3::zeros();
        let z0 = excited_state(&sys);
        let inputs = vec![AgentInput::zero(2), AgentInput::zero(2)];
        let p0 = sys.linear_momentum(&z0);
        let mut z = z0;
        for _ in 0..200 {
            z = sys.step(&z, &inputs, 1e-3).unwrap();
        }
        assert!((sys.linear_momentum(&z) - p0).norm() < 1e-9);
        assert!(sys.constraints(&z).norm() < 1e-8);
    }

    #[test]
    fn rk4_fourth_order() {
        let sys = system();
        let z0 = excited_state(&sys);
        let inputs = hover_inputs(&sys);
        let run = |h: f64| {
            let mut z = z0.clone();
            let steps = (0.5 / h).round() as usize;
            for _ in 0..steps {
                z = sys.step(&z, &inputs, h).unwrap();
            }
            sys.pack(&z)
        };
        let (a, b, c) = (run(0.02), run(0.01), run(0.005));
        let ratio = (&a - &b).norm() / (&b - &c).norm();
        assert!((ratio - 16.0).abs() < 3.0, "ratio {ratio}");
    }

    #[test]
    fn singular_system_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0]);
        assert!(matches!(solve_spd(&a, &b), Err(Error::SingularGrasp(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn wrench_identity_random(q in proptest::array::uniform3(-3.0..3.0f64), l in proptest::collection::vec(-10.0..10.0f64, 12)) {
            let att = PayloadParams::plate_default().attachments;
            let rot = exp_so3(&Vector3::new(q[0], q[1], q[2]));
            let lam = DVector::from_vec(l);
            let w = net_wrench(&rot, &att, &lam);
            let g = grasp_matrix(&rot, &att) * &lam;
            prop_assert!((g - DVector::from_column_slice(w.as_slice())).amax() < 1e-12);
        }
    }
}
