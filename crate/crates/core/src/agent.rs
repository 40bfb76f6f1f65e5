//! Single aerial manipulator: a rigid base with revolute point-mass arms.
//!
//! Base coordinates use the body-frame angular velocity `ω`, the joint rates
//! `ṙ`, and the inertial velocity of the centre of mass `v`. The rotational and
//! joint channels are integrated in momentum form, `(μ, ν) = M̄(r)(ω, ṙ)`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::liegroup::{hat, Rotation};

/// Standard gravity magnitude (m/s²).
pub const GRAVITY: f64 = 9.81;

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// One single-joint arm carrying a point mass at its tip.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    /// Link (tip) mass in kg.
    pub mass: f64,
    /// Distance from the joint to the tip in m.
    pub length: f64,
    /// Joint position in the body frame.
    pub mount: Vector3<f64>,
    /// Unit joint axis in the body frame.
    pub axis: Vector3<f64>,
    /// Unit link direction at `r = 0`, body frame.
    pub rest_direction: Vector3<f64>,
    /// Rotational inertia of the link about its joint axis (kg·m²).
    pub joint_inertia: f64,
}

impl Arm {
    /// Tip position `s(r)` in the body frame.
    pub fn tip(&self, r: f64) -> Vector3<f64> {
        self.mount + self.rotated_direction(r) * self.length
    }

    /// `∂s/∂r = a × (s − o)`.
    pub fn tip_rate(&self, r: f64) -> Vector3<f64> {
        self.axis.cross(&(self.rotated_direction(r) * self.length))
    }

    /// `∂²s/∂r² = a × (a × (s − o))`.
    pub fn tip_curvature(&self, r: f64) -> Vector3<f64> {
        self.axis.cross(&self.tip_rate(r))
    }

    fn rotated_direction(&self, r: f64) -> Vector3<f64> {
        // Rodrigues about a unit axis.
        let a = &self.axis;
        let d = &self.rest_direction;
        d * r.cos() + a.cross(d) * r.sin() + a * (a.dot(d) * (1.0 - r.cos()))
    }
}

/// Physical description of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentModel {
    pub base_mass: f64,
    pub base_inertia: Matrix3<f64>,
    pub arms: Vec<Arm>,
}

/// Blocks of the base-coordinate mass matrix `M₀(r)`, ordered `(ω, v₀, ṙ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MassBlocks {
    pub inertia: Matrix3<f64>,
    pub coupling: Matrix3<f64>,
    pub m_omega_r: DMatrix<f64>,
    pub m_v_r: DMatrix<f64>,
    pub m_r_r: DMatrix<f64>,
    pub mass: f64,
}

impl MassBlocks {
    pub fn n_joints(&self) -> usize {
        self.m_r_r.nrows()
    }

    /// Dense `M₀(r)` in `(ω, v₀, ṙ)` order.
    pub fn assemble(&self) -> DMatrix<f64> {
        let n = self.n_joints();
        let mut m = DMatrix::zeros(6 + n, 6 + n);
        m.view_mut((0, 0), (3, 3)).copy_from(&self.inertia);
        m.view_mut((0, 3), (3, 3)).copy_from(&self.coupling.transpose());
        m.view_mut((3, 0), (3, 3)).copy_from(&self.coupling);
        m.view_mut((3, 3), (3, 3)).copy_from(&(Matrix3::identity() * self.mass));
        m.view_mut((0, 6), (3, n)).copy_from(&self.m_omega_r);
        m.view_mut((6, 0), (n, 3)).copy_from(&self.m_omega_r.transpose());
        m.view_mut((3, 6), (3, n)).copy_from(&self.m_v_r);
        m.view_mut((6, 3), (n, 3)).copy_from(&self.m_v_r.transpose());
        m.view_mut((6, 6), (n, n)).copy_from(&self.m_r_r);
        m
    }

    /// `[C, M_vṙ]`, the translational coupling row block.
    fn translational_coupling(&self) -> DMatrix<f64> {
        let n = self.n_joints();
        let mut b = DMatrix::zeros(3, 3 + n);
        b.view_mut((0, 0), (3, 3)).copy_from(&self.coupling);
        b.view_mut((0, 3), (3, n)).copy_from(&self.m_v_r);
        b
    }

    fn rotational_block(&self) -> DMatrix<f64> {
        let n = self.n_joints();
        let mut a = DMatrix::zeros(3 + n, 3 + n);
        a.view_mut((0, 0), (3, 3)).copy_from(&self.inertia);
        a.view_mut((0, 3), (3, n)).copy_from(&self.m_omega_r);
        a.view_mut((3, 0), (n, 3)).copy_from(&self.m_omega_r.transpose());
        a.view_mut((3, 3), (n, n)).copy_from(&self.m_r_r);
        a
    }

    /// Reduced mass matrix `M̄ = A − BᵀB/m` acting on `ξ̄ = (ω, ṙ)`.
    pub fn reduced(&self) -> DMatrix<f64> {
        let b = self.translational_coupling();
        let mut m = self.rotational_block() - b.transpose() * &b / self.mass;
        symmetrize(&mut m);
        m
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Velocity of the centre of mass from the base velocity: `v = v₀ + (M_vṙ ṙ + Cω)/m`.
pub fn com_shift_velocity(
    blocks: &MassBlocks,
    omega: &Vector3<f64>,
    r_dot: &DVector<f64>,
    v0: &Vector3<f64>,
) -> Vector3<f64> {
    let shift = &blocks.m_v_r * r_dot;
    v0 + (Vector3::new(shift[0], shift[1], shift[2]) + blocks.coupling * omega) / blocks.mass
}

/// `½ ξ̄ᵀ ∂M̄ ξ̄` laid out on the `(μ, ν)` channels; the `μ` rows are zero.
pub fn quadratic_mass_term(derivatives: &[DMatrix<f64>], xi: &DVector<f64>) -> DVector<f64> {
    let n = derivatives.len();
    let mut out = DVector::zeros(3 + n);
    for (k, d) in derivatives.iter().enumerate() {
        out[3 + k] = 0.5 * xi.dot(&(d * xi));
    }
    out
}

impl AgentModel {
    /// Quadrotor base with two arms folding about the body x axis, grasping
    /// below the base at `(0, ±0.15, −0.3)` m when the joints are at rest.
    pub fn two_arm_default() -> Self {
        let arm = |side: f64| {
            let mount = Vector3::new(0.0, 0.05 * side, 0.0);
            let offset = Vector3::new(0.0, 0.1 * side, -0.3);
            Arm {
                mass: 0.1,
                length: offset.norm(),
                mount,
                axis: Vector3::x(),
                rest_direction: offset.normalize(),
                joint_inertia: 1e-4,
            }
        };
        AgentModel {
            base_mass: 1.0,
            base_inertia: Matrix3::from_diagonal(&Vector3::new(0.02, 0.02, 0.04)),
            arms: vec![arm(1.0), arm(-1.0)],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.arms.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.base_mass + self.arms.iter().map(|a| a.mass).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mass > 0.0) {
            return Err(Error::Configuration("agent base mass must be positive".into()));
        }
        if self.base_inertia.symmetric_eigenvalues().min() <= 0.0
            || (self.base_inertia - self.base_inertia.transpose()).norm() > 1e-12
        {
            return Err(Error::Configuration(
                "agent base inertia must be symmetric positive definite".into(),
            ));
        }
        for (b, arm) in self.arms.iter().enumerate() {
            let idx = b + 1;
            if arm.mass < 0.0 || arm.joint_inertia < 0.0 {
                return Err(Error::Configuration(format!(
                    "arm {idx}: mass and joint inertia must be non-negative"
                )));
            }
            if arm.mass == 0.0 && arm.joint_inertia == 0.0 {
                return Err(Error::Configuration(format!(
                    "arm {idx}: massless arm without joint inertia gives a singular mass matrix"
                )));
            }
            if !(arm.length > 0.0) {
                return Err(Error::Configuration(format!("arm {idx}: length must be positive")));
            }
            if (arm.axis.norm() - 1.0).abs() > 1e-9 || (arm.rest_direction.norm() - 1.0).abs() > 1e-9
            {
                return Err(Error::Configuration(format!(
                    "arm {idx}: axis and rest direction must be unit vectors"
                )));
            }
        }
        Ok(())
    }

    fn check_joints(&self, r: &DVector<f64>) -> Result<()> {
        if r.len() != self.n_joints() {
            return Err(Error::InvalidInput(format!(
                "expected {} joint coordinates, got {}",
                self.n_joints(),
                r.len()
            )));
        }
        Ok(())
    }

    /// Mass-matrix blocks from the kinetic energy of the base and tip masses.
    pub fn mass_blocks(&self, r: &DVector<f64>) -> Result<MassBlocks> {
        self.check_joints(r)?;
        let blocks = self.mass_blocks_unchecked(r);
        if blocks.assemble().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(format!(
                "assembled base mass matrix at r = {:?}",
                r.as_slice()
            )));
        }
        Ok(blocks)
    }

    pub(crate) fn mass_blocks_unchecked(&self, r: &DVector<f64>) -> MassBlocks {
        let n = self.n_joints();
        let mut inertia = self.base_inertia;
        let mut coupling = Matrix3::zeros();
        let mut m_omega_r = DMatrix::zeros(3, n);
        let mut m_v_r = DMatrix::zeros(3, n);
        let mut m_r_r = DMatrix::zeros(n, n);
        for (b, arm) in self.arms.iter().enumerate() {
            let s = arm.tip(r[b]);
            let ds = arm.tip_rate(r[b]);
            let hs = hat(&s);
            inertia -= hs * hs * arm.mass;
            inertia += arm.axis * arm.axis.transpose() * arm.joint_inertia;
            coupling -= hs * arm.mass;
            let col = s.cross(&ds) * arm.mass + arm.axis * arm.joint_inertia;
            m_omega_r.set_column(b, &col);
            m_v_r.set_column(b, &(ds * arm.mass));
            m_r_r[(b, b)] = arm.mass * ds.norm_squared() + arm.joint_inertia;
        }
        MassBlocks {
            inertia,
            coupling,
            m_omega_r,
            m_v_r,
            m_r_r,
            mass: self.total_mass(),
        }
    }

    /// Partial derivatives of the base blocks with respect to each joint.
    fn mass_block_derivatives(&self, r: &DVector<f64>) -> Vec<MassBlocks> {
        let n = self.n_joints();
        self.arms
            .iter()
            .enumerate()
            .map(|(b, arm)| {
                let s = arm.tip(r[b]);
                let ds = arm.tip_rate(r[b]);
                let dds = arm.tip_curvature(r[b]);
                let m = arm.mass;
                let inertia =
                    (Matrix3::identity() * (2.0 * s.dot(&ds)) - ds * s.transpose() - s * ds.transpose())
                        * m;
                let mut m_omega_r = DMatrix::zeros(3, n);
                m_omega_r.set_column(b, &(s.cross(&dds) * m));
                let mut m_v_r = DMatrix::zeros(3, n);
                m_v_r.set_column(b, &(dds * m));
                let mut m_r_r = DMatrix::zeros(n, n);
                m_r_r[(b, b)] = 2.0 * m * ds.dot(&dds);
                MassBlocks {
                    inertia,
                    coupling: -hat(&ds) * m,
                    m_omega_r,
                    m_v_r,
                    m_r_r,
                    mass: 0.0,
                }
            })
            .collect()
    }

    /// Analytic `∂M̄/∂r_k` for every joint `k`.
    pub fn reduced_mass_derivatives(&self, r: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let blocks = self.mass_blocks_unchecked(r);
        let b = blocks.translational_coupling();
        self.mass_block_derivatives(r)
            .iter()
            .map(|d| {
                let db = d.translational_coupling();
                let cross = db.transpose() * &b;
                let mut out = d.rotational_block() - (&cross + cross.transpose()) / blocks.mass;
                symmetrize(&mut out);
                out
            })
            .collect()
    }

    /// Central-difference `∂M̄/∂r_k`.
    pub fn reduced_mass_derivatives_fd(&self, r: &DVector<f64>, step: f64) -> Vec<DMatrix<f64>> {
        (0..self.n_joints())
            .map(|k| {
                let mut rp = r.clone();
                let mut rm = r.clone();
                rp[k] += step;
                rm[k] -= step;
                (self.mass_blocks_unchecked(&rp).reduced() - self.mass_blocks_unchecked(&rm).reduced())
                    / (2.0 * step)
            })
            .collect()
    }

    /// Centre of mass in the body frame, relative to the base origin.
    pub fn com_offset(&self, r: &DVector<f64>) -> Vector3<f64> {
        let sum: Vector3<f64> = self
            .arms
            .iter()
            .enumerate()
            .map(|(b, arm)| arm.tip(r[b]) * arm.mass)
            .sum();
        sum / self.total_mass()
    }

    /// Contact point of arm `b` relative to the centre of mass, body frame.
    pub fn contact_offset(&self, r: &DVector<f64>, b: usize) -> Vector3<f64> {
        self.arms[b].tip(r[b]) - self.com_offset(r)
    }

    /// `∂d_b/∂r` (3×n): `δ_bk s_b' − m_k s_k'/m`.
    pub fn contact_offset_jacobian(&self, r: &DVector<f64>, b: usize) -> DMatrix<f64> {
        let n = self.n_joints();
        let m = self.total_mass();
        let mut jac = DMatrix::zeros(3, n);
        for (k, arm) in self.arms.iter().enumerate() {
            let ds = arm.tip_rate(r[k]);
            let mut col = -ds * (arm.mass / m);
            if k == b {
                col += ds;
            }
            jac.set_column(k, &col);
        }
        jac
    }

    /// `(d/dt ∂d_b/∂r) ṙ`, the quadratic joint-rate term of the contact acceleration.
    pub fn contact_offset_curvature(&self, r: &DVector<f64>, r_dot: &DVector<f64>, b: usize) -> Vector3<f64> {
        let m = self.total_mass();
        let mut out = Vector3::zeros();
        for (k, arm) in self.arms.iter().enumerate() {
            let term = arm.tip_curvature(r[k]) * (r_dot[k] * r_dot[k]);
            out -= term * (arm.mass / m);
            if k == b {
                out += term;
            }
        }
        out
    }

    /// Agent state with the given pose and velocities; momenta filled from `M̄(r)`.
    pub fn state(
        &self,
        rot: Rotation,
        x: Vector3<f64>,
        r: DVector<f64>,
        omega: Vector3<f64>,
        v: Vector3<f64>,
        r_dot: DVector<f64>,
    ) -> Result<AgentState> {
        self.check_joints(&r)?;
        self.check_joints(&r_dot)?;
        let mbar = self.mass_blocks(&r)?.reduced();
        let mut xi = DVector::zeros(3 + r.len());
        xi.rows_mut(0, 3).copy_from(&omega);
        xi.rows_mut(3, r.len()).copy_from(&r_dot);
        let p = mbar * xi;
        Ok(AgentState {
            rot,
            x,
            r,
            omega,
            v,
            r_dot,
            mu: Vector3::new(p[0], p[1], p[2]),
            nu: p.rows(3, self.n_joints()).into_owned(),
        })
    }

    /// Inertial contact point `p_b = x + R d_b(r)`.
    pub fn contact_point(&self, state: &AgentState, b: usize) -> Vector3<f64> {
        state.x + state.rot.matrix() * self.contact_offset(&state.r, b)
    }

    /// Contact Jacobian `J_b = [−R hat(d_b), R ∂d_b/∂r]` mapping `(ω, ṙ)` to the
    /// contact-point velocity relative to the centre of mass.
    pub fn contact_jacobian(&self, state: &AgentState, b: usize) -> DMatrix<f64> {
        let n = self.n_joints();
        let rm = state.rot.matrix();
        let d = self.contact_offset(&state.r, b);
        let mut jac = DMatrix::zeros(3, 3 + n);
        jac.view_mut((0, 0), (3, 3)).copy_from(&(-rm * hat(&d)));
        jac.view_mut((0, 3), (3, n))
            .copy_from(&(DMatrix::from_column_slice(3, 3, rm.as_slice()) * self.contact_offset_jacobian(&state.r, b)));
        jac
    }

    /// `Σ_b J_bᵀ λ_b`, stacked on the `(μ, ν)` channels.
    pub fn contact_generalized_force(&self, state: &AgentState, lambdas: &[Vector3<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(3 + self.n_joints());
        for (b, lam) in lambdas.iter().enumerate() {
            out += self.contact_jacobian(state, b).transpose() * lam;
        }
        out
    }

    /// Derivative of the agent state.
    ///
    /// `lambdas[b]` is the force the agent exerts on the payload at contact `b`;
    /// the agent receives `−λ_b`.
    pub fn rhs(
        &self,
        state: &AgentState,
        input: &AgentInput,
        lambdas: &[Vector3<f64>],
        disturbance: &AgentDisturbance,
        gravity: &Vector3<f64>,
    ) -> Result<AgentDerivative> {
        let blocks = self.mass_blocks_unchecked(&state.r);
        let forces = disturbance.evaluate(state);
        let generalized = self.nominal_momentum_rate(state, &blocks, input)?;
        let contact = self.contact_generalized_force(state, lambdas);
        let lam_sum: Vector3<f64> = lambdas.iter().sum();
        let n = self.n_joints();
        let mut p_dot = generalized - contact;
        for i in 0..3 {
            p_dot[i] += forces.torque[i];
        }
        for k in 0..n {
            p_dot[3 + k] += forces.joint[k];
        }
        let thrust = state.rot.matrix() * Vector3::z() * input.thrust;
        let m = blocks.mass;
        let v_dot = gravity + (thrust + forces.force - lam_sum) / m;
        Ok(AgentDerivative {
            rot_dot: state.rot.matrix() * hat(&state.omega),
            x_dot: state.v,
            r_dot: state.r_dot.clone(),
            v_dot,
            mu_dot: Vector3::new(p_dot[0], p_dot[1], p_dot[2]),
            nu_dot: p_dot.rows(3, n).into_owned(),
        })
    }

    /// Momentum rate without contact forces or disturbances:
    /// `[μ×ω + τ − Cᵀe₃u/m; ½ξ̄ᵀ∂M̄ξ̄ + τ_r − M_vṙᵀe₃u/m]`.
    pub fn nominal_momentum_rate(
        &self,
        state: &AgentState,
        blocks: &MassBlocks,
        input: &AgentInput,
    ) -> Result<DVector<f64>> {
        let n = self.n_joints();
        if input.joint_torque.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} joint torques, got {}",
                input.joint_torque.len()
            )));
        }
        let xi = state.xi();
        let mut out = quadratic_mass_term(&self.reduced_mass_derivatives(&state.r), &xi);
        let e3u = Vector3::z() * (input.thrust / blocks.mass);
        let top = state.mu.cross(&state.omega) + input.torque - blocks.coupling.transpose() * e3u;
        out.rows_mut(0, 3).copy_from(&top);
        let joint = blocks.m_v_r.transpose() * e3u;
        for k in 0..n {
            out[3 + k] += input.joint_torque[k] - joint[k];
        }
        Ok(out)
    }

    /// Kinetic plus gravitational potential energy.
    pub fn energy(&self, state: &AgentState) -> f64 {
        let blocks = self.mass_blocks_unchecked(&state.r);
        let xi = state.xi();
        let rot = 0.5 * xi.dot(&(blocks.reduced() * &xi));
        0.5 * blocks.mass * state.v.norm_squared() + rot - blocks.mass * gravity_vector().dot(&state.x)
    }

    /// Power delivered by the inputs:
    /// `Re₃u·v − (Cᵀe₃u/m)·ω − (M_vṙᵀe₃u/m)·ṙ + τ·ω + τ_r·ṙ`.
    pub fn input_power(&self, state: &AgentState, input: &AgentInput) -> f64 {
        let blocks = self.mass_blocks_unchecked(&state.r);
        let e3u = Vector3::z() * (input.thrust / blocks.mass);
        let thrust = state.rot.matrix() * Vector3::z() * input.thrust;
        thrust.dot(&state.v) - (blocks.coupling.transpose() * e3u).dot(&state.omega)
            - (blocks.m_v_r.transpose() * e3u).dot(&state.r_dot)
            + input.torque.dot(&state.omega)
            + input.joint_torque.dot(&state.r_dot)
    }
}

/// Reduced state of one agent. `ω, ṙ` are kept consistent with `μ, ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub rot: Rotation,
    /// Centre-of-mass position, inertial frame.
    pub x: Vector3<f64>,
    pub r: DVector<f64>,
    /// Body-frame angular velocity.
    pub omega: Vector3<f64>,
    /// Centre-of-mass velocity, inertial frame.
    pub v: Vector3<f64>,
    pub r_dot: DVector<f64>,
    pub mu: Vector3<f64>,
    pub nu: DVector<f64>,
}

impl AgentState {
    /// `ξ̄ = (ω, ṙ)`.
    pub fn xi(&self) -> DVector<f64> {
        let n = self.r.len();
        let mut xi = DVector::zeros(3 + n);
        xi.rows_mut(0, 3).copy_from(&self.omega);
        xi.rows_mut(3, n).copy_from(&self.r_dot);
        xi
    }

    /// `(μ, ν)` stacked.
    pub fn momentum(&self) -> DVector<f64> {
        let n = self.nu.len();
        let mut p = DVector::zeros(3 + n);
        p.rows_mut(0, 3).copy_from(&self.mu);
        p.rows_mut(3, n).copy_from(&self.nu);
        p
    }

    /// Recomputes `(ω, ṙ) = M̄(r)⁻¹(μ, ν)`.
    pub fn sync_velocities(&mut self, model: &AgentModel) -> Result<()> {
        let mbar = model.mass_blocks_unchecked(&self.r).reduced();
        let chol = mbar
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("reduced mass matrix".into()))?;
        let xi = chol.solve(&self.momentum());
        self.omega = Vector3::new(xi[0], xi[1], xi[2]);
        self.r_dot = xi.rows(3, self.r.len()).into_owned();
        Ok(())
    }

    /// Recomputes `(μ, ν) = M̄(r)(ω, ṙ)`.
    pub fn sync_momenta(&mut self, model: &AgentModel) {
        let p = model.mass_blocks_unchecked(&self.r).reduced() * self.xi();
        self.mu = Vector3::new(p[0], p[1], p[2]);
        self.nu = p.rows(3, self.r.len()).into_owned();
    }

    /// `‖(μ, ν) − M̄(r)(ω, ṙ)‖`.
    pub fn momentum_residual(&self, model: &AgentModel) -> f64 {
        (self.momentum() - model.mass_blocks_unchecked(&self.r).reduced() * self.xi()).norm()
    }

    /// Feature vector `[vec R, x, r, ω, v, ṙ]` (column-major `R`).
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(18 + 2 * self.r.len());
        f.extend_from_slice(self.rot.matrix().as_slice());
        f.extend_from_slice(self.x.as_slice());
        f.extend_from_slice(self.r.as_slice());
        f.extend_from_slice(self.omega.as_slice());
        f.extend_from_slice(self.v.as_slice());
        f.extend_from_slice(self.r_dot.as_slice());
        f
    }
}

/// Time derivative of an [`AgentState`]; `rot_dot = R hat(ω)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentDerivative {
    pub rot_dot: Matrix3<f64>,
    pub x_dot: Vector3<f64>,
    pub r_dot: DVector<f64>,
    pub v_dot: Vector3<f64>,
    pub mu_dot: Vector3<f64>,
    pub nu_dot: DVector<f64>,
}

/// Thrust along `R e₃`, body torque and joint torques.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput {
    pub thrust: f64,
    pub torque: Vector3<f64>,
    pub joint_torque: DVector<f64>,
}

impl AgentInput {
    pub fn zero(n_joints: usize) -> Self {
        AgentInput {
            thrust: 0.0,
            torque: Vector3::zeros(),
            joint_torque: DVector::zeros(n_joints),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.thrust.is_finite()
            && self.torque.iter().all(|v| v.is_finite())
            && self.joint_torque.iter().all(|v| v.is_finite());
        if !finite || self.thrust < 0.0 {
            return Err(Error::InvalidInput(format!(
                "agent input must be finite with non-negative thrust (u = {})",
                self.thrust
            )));
        }
        Ok(())
    }
}

/// Unmodelled forces acting on one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentForces {
    /// Inertial force on the centre of mass.
    pub force: Vector3<f64>,
    /// Body torque on the `μ` channel.
    pub torque: Vector3<f64>,
    pub joint: DVector<f64>,
}

/// Disturbance field acting on an agent: linear drag on the centre-of-mass
/// velocity plus constant biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentDisturbance {
    pub drag: f64,
    pub force_bias: Vector3<f64>,
    pub torque_bias: Vector3<f64>,
    pub joint_bias: Vec<f64>,
}

impl AgentDisturbance {
    pub fn zero(n_joints: usize) -> Self {
        AgentDisturbance {
            drag: 0.0,
            force_bias: Vector3::zeros(),
            torque_bias: Vector3::zeros(),
            joint_bias: vec![0.0; n_joints],
        }
    }

    pub fn evaluate(&self, state: &AgentState) -> AgentForces {
        let n = state.r.len();
        AgentForces {
            force: self.force_bias - state.v * self.drag,
            torque: self.torque_bias,
            joint: DVector::from_fn(n, |k, _| self.joint_bias.get(k).copied().unwrap_or(0.0)),
        }
    }
}
