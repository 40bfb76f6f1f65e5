//! Scenario configuration read from TOML. Every table is optional and falls
//! back to the default scenario; unknown keys are rejected.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::agent::{AgentDisturbance, AgentModel, Arm};
use crate::control::{AgentGains, InternalForceMode, NominalPayload, PayloadGains, Reference};
use crate::error::{Error, Result};
use crate::gp::{FitOptions, KernelParams, LENGTH_SCALE_MAX, LENGTH_SCALE_MIN};
use crate::liegroup::Rotation;
use crate::payload::{CoupledSystem, PayloadDisturbance, PayloadParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Master seed; every noise source derives its own stream from it.
    pub seed: u64,
    pub agent: AgentConfig,
    pub payload: PayloadConfig,
    pub control: ControlConfig,
    pub internal_force: InternalForceConfig,
    pub disturbance: DisturbanceConfig,
    pub reference: ReferenceConfig,
    pub gp: GpConfig,
    pub integrator: IntegratorConfig,
}

/// Identical agents, each a base with two mirrored arms about body x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Number of agents `N`; agent `j` holds attachments `2j` and `2j + 1`.
    pub count: usize,
    pub base_mass: f64,
    pub base_inertia: [f64; 3],
    pub arm_mass: f64,
    pub joint_inertia: f64,
    /// Joint of the `+y` arm in the body frame (the other arm is mirrored).
    pub arm_mount: [f64; 3],
    /// Tip of the `+y` arm at rest, body frame.
    pub arm_tip: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayloadConfig {
    /// True mass used by the simulator.
    pub mass: f64,
    /// True principal inertia.
    pub inertia: [f64; 3],
    /// Mass assumed by the controller and the labeler.
    pub nominal_mass: f64,
    pub nominal_inertia: [f64; 3],
    /// Attachment points in the payload frame, two per agent.
    pub attachments: Vec<[f64; 3]>,
    pub initial_position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub k_p: f64,
    pub k_v: f64,
    /// `K_R = k_r · J_nominal`.
    pub k_r: f64,
    /// `K_ω = k_omega · J_nominal`.
    pub k_omega: f64,
    /// Leader contacts (0-based).
    pub leader: Vec<usize>,
    pub agent_k_r: f64,
    pub agent_k_omega: f64,
    pub plan_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InternalMode {
    Follower,
    Grasp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaProfile {
    Zero,
    /// `η_i(t) = a sin(2π f t + i)`.
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InternalForceConfig {
    pub mode: InternalMode,
    pub profile: EtaProfile,
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbancePreset {
    None,
    Default,
}

/// Velocity drag plus constant biases on the payload and on agent 1; agent 2
/// gets the same terms with the horizontal signs flipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub preset: DisturbancePreset,
    /// Multiplies every magnitude below.
    pub scale: f64,
    pub agent_drag: f64,
    pub agent_force: [f64; 3],
    pub agent_torque: [f64; 3],
    pub agent_joint: [f64; 2],
    pub payload_drag: f64,
    pub payload_force: [f64; 3],
    pub payload_torque: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Hover,
    Figure8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub kind: ReferenceKind,
    pub center: [f64; 3],
    pub amplitude: f64,
    /// Period of the figure-eight in s.
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Standard deviation of the label noise.
    pub sigma_meas: f64,
    /// Standard deviation of the noise on the contact-force estimate used by
    /// the labeler (N); 0 uses the exact multipliers.
    pub lambda_noise: f64,
    /// Labelling rate in Hz.
    pub label_rate: f64,
    pub update_times: Vec<f64>,
    pub budget: usize,
    pub fit_size: usize,
    pub fit_starts: usize,
    pub fit_iterations: usize,
    pub fixed_hyperparameters: bool,
    pub length_scale_min: f64,
    pub length_scale_max: f64,
    pub prior_signal_variance: f64,
    pub prior_length_scale: f64,
    pub prior_noise_variance: f64,
    /// Joint confidence level of the learned bounds.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub horizon: f64,
    pub baumgarte: f64,
    /// Steps between manifold projections; 0 disables projection.
    pub projection_period: usize,
    /// Logging rate in Hz.
    pub log_rate: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 7,
            agent: AgentConfig::default(),
            payload: PayloadConfig::default(),
            control: ControlConfig::default(),
            internal_force: InternalForceConfig::default(),
            disturbance: DisturbanceConfig::default(),
            reference: ReferenceConfig::default(),
            gp: GpConfig::default(),
            integrator: IntegratorConfig::default(),
        }
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            count: 2,
            base_mass: 1.0,
            base_inertia: [0.02, 0.02, 0.04],
            arm_mass: 0.1,
            joint_inertia: 1e-4,
            arm_mount: [0.0, 0.05, 0.0],
            arm_tip: [0.0, 0.15, -0.3],
        }
    }
}

impl Default for PayloadConfig {
    fn default() -> Self {
        PayloadConfig {
            mass: 1.65,
            inertia: [0.033, 0.055, 0.077],
            nominal_mass: 1.5,
            nominal_inertia: [0.03, 0.05, 0.07],
            attachments: vec![
                [0.25, 0.15, 0.0],
                [0.25, -0.15, 0.0],
                [-0.25, 0.15, 0.0],
                [-0.25, -0.15, 0.0],
            ],
            initial_position: [0.0, 0.0, 1.0],
        }
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            k_p: 4.0,
            k_v: 4.0,
            k_r: 8.0,
            k_omega: 2.5,
            leader: vec![0, 1, 2],
            agent_k_r: 400.0,
            agent_k_omega: 36.0,
            plan_weight: 1e-3,
        }
    }
}

impl Default for InternalForceConfig {
    fn default() -> Self {
        InternalForceConfig {
            mode: InternalMode::Grasp,
            profile: EtaProfile::Zero,
            amplitude: 1.0,
            frequency: 0.5,
        }
    }
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig {
            preset: DisturbancePreset::Default,
            scale: 1.0,
            agent_drag: 0.3,
            agent_force: [0.6, -0.4, -1.0],
            agent_torque: [0.02, -0.02, 0.01],
            agent_joint: [0.01, -0.01],
            payload_drag: 0.4,
            payload_force: [0.5, 0.4, -0.6],
            payload_torque: [0.03, -0.02, 0.02],
        }
    }
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            kind: ReferenceKind::Figure8,
            center: [0.0, 0.0, 1.0],
            amplitude: 0.5,
            period: 10.0,
        }
    }
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            sigma_meas: 1e-3,
            lambda_noise: 0.0,
            label_rate: 50.0,
            update_times: vec![2.0, 6.0, 10.0],
            budget: 200,
            fit_size: 60,
            fit_starts: 2,
            fit_iterations: 40,
            fixed_hyperparameters: false,
            length_scale_min: LENGTH_SCALE_MIN,
            length_scale_max: LENGTH_SCALE_MAX,
            prior_signal_variance: 1.0,
            prior_length_scale: 1.0,
            prior_noise_variance: 0.01,
            delta: 0.9,
        }
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt: 1e-3,
            horizon: 20.0,
            baumgarte: 20.0,
            projection_period: 100,
            log_rate: 100.0,
        }
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn diag(a: [f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&v3(a))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Configuration(format!("{name} must be positive, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.agent;
        if a.count == 0 {
            return Err(Error::Configuration("agent.count must be at least 1".into()));
        }
        positive("agent.base_mass", a.base_mass)?;
        for v in a.base_inertia {
            positive("agent.base_inertia", v)?;
        }
        if a.arm_mass < 0.0 || a.joint_inertia < 0.0 {
            return Err(Error::Configuration("agent arm mass and joint inertia must be non-negative".into()));
        }
        let p = &self.payload;
        positive("payload.mass", p.mass)?;
        positive("payload.nominal_mass", p.nominal_mass)?;
        for v in p.inertia.iter().chain(&p.nominal_inertia) {
            positive("payload inertia", *v)?;
        }
        if p.attachments.len() != 2 * a.count {
            return Err(Error::Configuration(format!(
                "{} attachments for {} two-arm agents",
                p.attachments.len(),
                a.count
            )));
        }
        let c = &self.control;
        for (n, v) in [
            ("control.k_p", c.k_p),
            ("control.k_v", c.k_v),
            ("control.k_r", c.k_r),
            ("control.k_omega", c.k_omega),
            ("control.agent_k_r", c.agent_k_r),
            ("control.agent_k_omega", c.agent_k_omega),
            ("control.plan_weight", c.plan_weight),
        ] {
            positive(n, v)?;
        }
        if c.leader.is_empty() || c.leader.iter().any(|&i| i >= p.attachments.len()) {
            return Err(Error::Configuration("control.leader must list valid contact indices".into()));
        }
        if self.internal_force.amplitude < 0.0 || self.internal_force.frequency < 0.0 {
            return Err(Error::Configuration("internal_force amplitude and frequency must be non-negative".into()));
        }
        if self.disturbance.scale < 0.0 {
            return Err(Error::Configuration("disturbance.scale must be non-negative".into()));
        }
        let r = &self.reference;
        if r.kind == ReferenceKind::Figure8 {
            positive("reference.period", r.period)?;
        }
        let g = &self.gp;
        if g.sigma_meas < 0.0 || g.lambda_noise < 0.0 {
            return Err(Error::Configuration("gp noise levels must be non-negative".into()));
        }
        positive("gp.label_rate", g.label_rate)?;
        if g.budget == 0 {
            return Err(Error::Configuration("gp.budget must be at least 1".into()));
        }
        if g.fit_starts == 0 {
            return Err(Error::Configuration("gp.fit_starts must be at least 1".into()));
        }
        if !(g.length_scale_min > 0.0 && g.length_scale_min < g.length_scale_max) {
            return Err(Error::Configuration("gp length-scale bounds must satisfy 0 < min < max".into()));
        }
        positive("gp.prior_signal_variance", g.prior_signal_variance)?;
        positive("gp.prior_length_scale", g.prior_length_scale)?;
        positive("gp.prior_noise_variance", g.prior_noise_variance)?;
        if !(g.delta > 0.0 && g.delta < 1.0) {
            return Err(Error::Configuration(format!("gp.delta must lie in (0, 1), got {}", g.delta)));
        }
        if g.update_times.windows(2).any(|w| !(w[1] > w[0])) || g.update_times.iter().any(|t| *t < 0.0) {
            return Err(Error::Configuration("gp.update_times must be non-negative and strictly increasing".into()));
        }
        let i = &self.integrator;
        positive("integrator.dt", i.dt)?;
        positive("integrator.horizon", i.horizon)?;
        positive("integrator.baumgarte", i.baumgarte)?;
        positive("integrator.log_rate", i.log_rate)?;
        if i.log_rate * i.dt > 1.0 + 1e-12 {
            return Err(Error::Configuration("integrator.log_rate exceeds the step rate".into()));
        }
        if g.label_rate * i.dt > 1.0 + 1e-12 {
            return Err(Error::Configuration("gp.label_rate exceeds the step rate".into()));
        }
        self.build_system()?;
        Ok(())
    }

    pub fn agent_model(&self) -> AgentModel {
        let a = &self.agent;
        let arm = |side: f64| {
            let mount = Vector3::new(a.arm_mount[0], side * a.arm_mount[1], a.arm_mount[2]);
            let tip = Vector3::new(a.arm_tip[0], side * a.arm_tip[1], a.arm_tip[2]);
            let offset = tip - mount;
            Arm {
                mass: a.arm_mass,
                length: offset.norm(),
                mount,
                axis: Vector3::x(),
                rest_direction: offset.normalize(),
                joint_inertia: a.joint_inertia,
            }
        };
        AgentModel {
            base_mass: a.base_mass,
            base_inertia: diag(a.base_inertia),
            arms: vec![arm(1.0), arm(-1.0)],
        }
    }

    fn attachments(&self) -> Vec<Vector3<f64>> {
        self.payload.attachments.iter().map(|&c| v3(c)).collect()
    }

    /// Simulated plant: true payload parameters and the disturbance preset.
    pub fn build_system(&self) -> Result<CoupledSystem> {
        let payload = PayloadParams {
            mass: self.payload.mass,
            inertia: diag(self.payload.inertia),
            attachments: self.attachments(),
        };
        let mut sys = CoupledSystem::new(vec![self.agent_model(); self.agent.count], payload)?;
        sys.baumgarte = self.integrator.baumgarte;
        let d = &self.disturbance;
        if d.preset == DisturbancePreset::Default {
            let s = d.scale;
            for (j, dist) in sys.agent_disturbances.iter_mut().enumerate() {
                let flip = if j % 2 == 0 { 1.0 } else { -1.0 };
                let f = v3(d.agent_force);
                let t = v3(d.agent_torque);
                *dist = AgentDisturbance {
                    drag: s * d.agent_drag,
                    force_bias: Vector3::new(flip * f.x, flip * f.y, f.z) * s,
                    torque_bias: Vector3::new(flip * t.x, flip * t.y, t.z) * s,
                    joint_bias: d.agent_joint.iter().map(|v| s * v).collect(),
                };
            }
            sys.payload_disturbance = PayloadDisturbance {
                drag: s * d.payload_drag,
                force_bias: v3(d.payload_force) * s,
                torque_bias: v3(d.payload_torque) * s,
            };
        }
        Ok(sys)
    }

    pub fn nominal_payload(&self) -> NominalPayload {
        NominalPayload {
            mass: self.payload.nominal_mass,
            inertia: diag(self.payload.nominal_inertia),
        }
    }

    /// Nominal payload parameters with the true attachments, as the labeler sees them.
    pub fn nominal_payload_params(&self) -> PayloadParams {
        PayloadParams {
            mass: self.payload.nominal_mass,
            inertia: diag(self.payload.nominal_inertia),
            attachments: self.attachments(),
        }
    }

    pub fn payload_gains(&self) -> PayloadGains {
        let j = diag(self.payload.nominal_inertia);
        let c = &self.control;
        PayloadGains {
            k_p: Matrix3::identity() * c.k_p,
            k_v: Matrix3::identity() * c.k_v,
            k_r: j * c.k_r,
            k_omega: j * c.k_omega,
        }
    }

    pub fn agent_gains(&self) -> AgentGains {
        AgentGains {
            k_r: self.control.agent_k_r,
            k_omega: self.control.agent_k_omega,
            plan_weight: self.control.plan_weight,
        }
    }

    pub fn internal_mode(&self) -> InternalForceMode {
        match self.internal_force.mode {
            InternalMode::Follower => InternalForceMode::Follower,
            InternalMode::Grasp => InternalForceMode::Grasp,
        }
    }

    pub fn reference(&self) -> Reference {
        let r = &self.reference;
        match r.kind {
            ReferenceKind::Hover => Reference::Hover {
                p: v3(r.center),
                rot: Rotation::identity(),
            },
            ReferenceKind::Figure8 => Reference::FigureEight {
                center: v3(r.center),
                amplitude: r.amplitude,
                frequency: 2.0 * std::f64::consts::PI / r.period,
                rot: Rotation::identity(),
            },
        }
    }

    pub fn prior_kernel(&self, dim: usize) -> KernelParams {
        let g = &self.gp;
        KernelParams::isotropic(dim, g.prior_signal_variance, g.prior_length_scale, g.prior_noise_variance)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            starts: self.gp.fit_starts,
            iterations: self.gp.fit_iterations,
            length_scale_bounds: (self.gp.length_scale_min, self.gp.length_scale_max),
            seed: self.seed,
            ..FitOptions::default()
        }
    }

    /// Number of integration steps, rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        (self.integrator.horizon / self.integrator.dt).round() as usize
    }

    /// Steps between two logged samples.
    pub fn log_every(&self) -> usize {
        ((1.0 / (self.integrator.log_rate * self.integrator.dt)).round() as usize).max(1)
    }

    pub fn label_every(&self) -> usize {
        ((1.0 / (self.gp.label_rate * self.integrator.dt)).round() as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ScenarioConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_falls_back_to_defaults() {
        let cfg = ScenarioConfig::from_toml_str("seed = 3\n[integrator]\nhorizon = 2.0\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.integrator.horizon, 2.0);
        assert_eq!(cfg.integrator.dt, 1e-3);
        assert_eq!(cfg.steps(), 2000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ScenarioConfig::from_toml_str("[payload]\nmas = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("mas"), "{err}");
        assert!(ScenarioConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ScenarioConfig::from_toml_str("[payload]\nmass = -1.0\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[gp]\ndelta = 1.0\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[gp]\nupdate_times = [2.0, 1.0]\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[control]\nleader = [0, 9]\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[agent]\ncount = 3\n").is_err());
    }

    #[test]
    fn default_plant_matches_documented_masses() {
        let cfg = ScenarioConfig::default();
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.agents.len(), 2);
        assert!((sys.agents[0].total_mass() - 1.2).abs() < 1e-12);
        let reference = AgentModel::two_arm_default();
        for (a, b) in sys.agents[0].arms.iter().zip(&reference.arms) {
            assert!((a.tip(0.0) - b.tip(0.0)).norm() < 1e-15);
            assert_eq!(a.mass, b.mass);
            assert_eq!(a.joint_inertia, b.joint_inertia);
        }
        assert_eq!(sys.agents[0].base_inertia, reference.base_inertia);
        assert_eq!(sys.agent_disturbances[1].force_bias, Vector3::new(-0.6, 0.4, -1.0));
        assert_eq!(cfg.log_every(), 10);
        assert_eq!(cfg.label_every(), 20);
    }
}
