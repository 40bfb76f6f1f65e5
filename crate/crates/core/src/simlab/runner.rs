//! Closed-loop simulation of one controller configuration.

use log::{debug, info};
use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EtaProfile, ScenarioConfig};
use super::{Case, MetricsLog, MetricsRow, Summary};
use crate::agent::AgentInput;
use crate::control::{
    apply_payload_correction, fit_interface_constants, predicted_payload_acceleration, wrench_mismatch,
    wrench_nominal, Allocator, InterfaceFit, InterfaceSample, RealizationMemory, Realizer,
};
use crate::error::{Error, Result};
use crate::gp::{
    add_label_noise, agent_channels, agent_feature_dim, agent_features, average_inputs, confidence_split,
    label_agent, label_payload, payload_features, ConfidenceBound, GpModel, KernelParams, ScheduleOptions,
    ScheduledGp, UpdateRecord, PAYLOAD_CHANNELS, PAYLOAD_FEATURES,
};
use crate::payload::{grasp_matrix, CoupledState, CoupledSystem, PayloadState};

/// Noise streams; each source owns one so that every case sees the same draws.
const STREAM_PAYLOAD_LABELS: u64 = 1;
const STREAM_AGENT_LABELS: u64 = 2;
const STREAM_LAMBDA: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Internal-force input at time `t`.
pub fn eta_vector(cfg: &ScenarioConfig, dim: usize, t: f64) -> DVector<f64> {
    let e = &cfg.internal_force;
    match e.profile {
        EtaProfile::Zero => DVector::zeros(dim),
        EtaProfile::Sine => DVector::from_fn(dim, |i, _| {
            e.amplitude * (2.0 * std::f64::consts::PI * e.frequency * t + i as f64).sin()
        }),
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub case: Case,
    pub log: MetricsLog,
    /// Envelope samples at the logging rate.
    pub interface: Vec<InterfaceSample>,
    /// `‖e_λ(t)‖` alongside each interface sample.
    pub e_lambda: Vec<f64>,
    pub interface_fit: Option<InterfaceFit>,
    pub max_phi: f64,
    pub max_phi_dot: f64,
    /// Largest `‖G λ_cmd − W_cmd‖` over the logged steps.
    pub max_wrench_residual: f64,
    pub payload_updates: Vec<UpdateRecord>,
    pub agent_updates: Vec<Vec<UpdateRecord>>,
    pub payload_model: GpModel,
    pub agent_models: Vec<GpModel>,
    pub summary: Summary,
}

fn schedule_options(cfg: &ScenarioConfig, prior: Vec<KernelParams>, seed_offset: u64) -> ScheduleOptions {
    let mut fit = cfg.fit_options();
    fit.seed = fit.seed.wrapping_add(seed_offset);
    ScheduleOptions {
        update_times: cfg.gp.update_times.clone(),
        budget: cfg.gp.budget,
        fit_size: cfg.gp.fit_size,
        fit,
        prior,
        fixed_hyperparameters: cfg.gp.fixed_hyperparameters,
    }
}

fn solver_error(t: f64, z: &CoupledState, err: Error) -> Error {
    let p = &z.payload;
    let agents: Vec<String> = z
        .agents
        .iter()
        .map(|a| format!("x = {:?}, r = {:?}", a.x.as_slice(), a.r.as_slice()))
        .collect();
    Error::Solver {
        t,
        message: format!(
            "{err}; payload p = {:?}, v = {:?}, omega = {:?}; agents [{}]",
            p.p.as_slice(),
            p.v.as_slice(),
            p.omega.as_slice(),
            agents.join("; ")
        ),
    }
}

/// Start of the learning interval containing `t`.
fn interval_start(times: &[f64], t: f64) -> f64 {
    times.iter().copied().filter(|&tk| tk <= t + 1e-12).fold(0.0, f64::max)
}

struct Team {
    sys: CoupledSystem,
    allocator: Allocator,
    realizer: Realizer,
}

/// Runs one configuration over the full horizon.
pub fn run_case(cfg: &ScenarioConfig, case: Case) -> Result<CaseResult> {
    cfg.validate()?;
    let sys = cfg.build_system()?;
    let team = Team {
        allocator: Allocator::new(&sys.payload.attachments, &cfg.control.leader, cfg.internal_mode())?,
        realizer: Realizer::new(cfg.agent_gains())?,
        sys,
    };
    let sys = &team.sys;
    let n_agents = sys.agents.len();
    let nominal = cfg.nominal_payload();
    let labeler_params = cfg.nominal_payload_params();
    let gains = cfg.payload_gains();
    gains.validate()?;
    let reference = cfg.reference();
    let h = cfg.integrator.dt;
    let steps = cfg.steps();
    let log_every = cfg.log_every();
    let label_every = cfg.label_every();
    let last_update = cfg.gp.update_times.last().copied().unwrap_or(0.0);
    let delta_split = confidence_split(cfg.gp.delta, n_agents);

    let mut payload_gp = ScheduledGp::new(
        PAYLOAD_FEATURES,
        PAYLOAD_CHANNELS,
        schedule_options(cfg, vec![cfg.prior_kernel(PAYLOAD_FEATURES); PAYLOAD_CHANNELS], 0),
    )?;
    let mut agent_gps = sys
        .agents
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let (d, c) = (agent_feature_dim(a.n_joints()), agent_channels(a.n_joints()));
            ScheduledGp::new(d, c, schedule_options(cfg, vec![cfg.prior_kernel(d); c], 100 * (j as u64 + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut agent_bounds = agent_gps
        .iter()
        .map(|g| ConfidenceBound::new(g.model(), delta_split, None))
        .collect::<Result<Vec<_>>>()?;

    let mut rng_payload = stream(cfg.seed, STREAM_PAYLOAD_LABELS);
    let mut rng_agent = stream(cfg.seed, STREAM_AGENT_LABELS);
    let mut rng_lambda = stream(cfg.seed, STREAM_LAMBDA);
    let lambda_noise = if cfg.gp.lambda_noise > 0.0 {
        Some(Normal::new(0.0, cfg.gp.lambda_noise).map_err(|e| Error::Configuration(e.to_string()))?)
    } else {
        None
    };

    let p0 = cfg.payload.initial_position;
    let mut z = sys.rigid_layout(&PayloadState::at_rest(Vector3::new(p0[0], p0[1], p0[2])))?;
    let mut memory = vec![RealizationMemory::default(); n_agents];
    let mut history: Vec<(CoupledState, Vec<AgentInput>)> = Vec::with_capacity(3);

    let mut log = MetricsLog {
        contacts_per_agent: sys.agents.iter().map(|a| a.n_joints()).collect(),
        rows: Vec::with_capacity(steps / log_every + 1),
    };
    let mut interface = Vec::new();
    let mut e_lambda_log = Vec::new();
    let mut e_lambda_k: Option<(f64, f64)> = None;
    let mut max_phi = sys.constraints(&z).norm();
    let mut max_phi_dot = sys.constraint_rate(&z).norm();
    let mut max_residual: f64 = 0.0;
    let timer = std::time::Instant::now();

    for k in 0..=steps {
        let t = k as f64 * h;
        if case.payload_learning() {
            payload_gp.update(t)?;
        }
        if case.agent_learning() && agent_gps.iter_mut().map(|g| g.update(t)).collect::<Result<Vec<_>>>()?.contains(&true) {
            agent_bounds = agent_gps
                .iter()
                .map(|g| ConfidenceBound::new(g.model(), delta_split, None))
                .collect::<Result<Vec<_>>>()?;
        }
        let r = reference.sample(t);
        let x_l = payload_features(&z.payload, &r);
        let mean_l = if case.payload_learning() && !payload_gp.model().is_empty() {
            payload_gp.model().mean(&x_l)
        } else {
            vec![0.0; PAYLOAD_CHANNELS]
        };
        let cmd = apply_payload_correction(wrench_nominal(&z.payload, &r, &gains, &nominal, &sys.gravity), &mean_l);
        let w_cmd = cmd.inertial(&z.payload.rot);
        let eta = eta_vector(cfg, team.allocator.nullspace_dim(), t);
        let alloc = team.allocator.allocate(&w_cmd, &z.payload.rot, &eta)?;
        let learned: Vec<Vec<f64>> = agent_gps
            .iter()
            .zip(&z.agents)
            .map(|(g, a)| {
                if case.agent_learning() && !g.model().is_empty() {
                    g.model().mean(&agent_features(a))
                } else {
                    Vec::new()
                }
            })
            .collect();
        let acc = predicted_payload_acceleration(&z.payload, &cmd, &nominal, &mean_l, &sys.gravity);
        let outs = team
            .realizer
            .realize_team(sys, &z, &alloc.lambda_cmd, &acc, &learned, &mut memory)
            .map_err(|e| solver_error(t, &z, e))?;
        let inputs: Vec<AgentInput> = outs.into_iter().map(|o| o.input).collect();

        let tk = interval_start(&cfg.gp.update_times, t);
        let need_tk = e_lambda_k.map_or(true, |(t_prev, _)| t_prev < tk);
        if k % log_every == 0 || need_tk {
            let sol = sys.solve_contact_forces(&z, &inputs).map_err(|e| solver_error(t, &z, e))?;
            let g = grasp_matrix(&z.payload.rot, &sys.payload.attachments);
            let diag = wrench_mismatch(&sol.lambda, &alloc.lambda_cmd, &w_cmd, &g)?;
            let e_lam = diag.e_lambda.norm();
            if need_tk {
                e_lambda_k = Some((tk, e_lam));
            }
            if k % log_every == 0 {
                max_residual = max_residual.max((&g * &alloc.lambda_cmd - DVector::from_column_slice(w_cmd.as_slice())).norm());
                let err = crate::control::payload_errors(&z.payload, &r);
                let sigma_l = payload_gp.model().posterior(&x_l).spectral_std();
                let mut sigma_a = 0.0;
                let mut rho = Vec::with_capacity(n_agents);
                for ((g, b), a) in agent_gps.iter().zip(&agent_bounds).zip(&z.agents) {
                    let x = agent_features(a);
                    sigma_a += g.model().posterior(&x).spectral_std();
                    rho.push(b.rho(g.model(), &x));
                }
                log.rows.push(MetricsRow {
                    t,
                    e_p: err.e_p.norm(),
                    e_v: err.e_v.norm(),
                    e_r: err.attitude.e_r.norm(),
                    e_omega: err.attitude.e_omega.norm(),
                    psi: err.attitude.psi,
                    dw: diag.delta_w.norm(),
                    sigma_l,
                    sigma_a,
                    lambda: (0..sys.n_contacts())
                        .map(|i| sol.lambda.rows(3 * i, 3).norm())
                        .collect(),
                    eta: eta.norm(),
                    phi: sys.constraints(&z).norm(),
                });
                interface.push(InterfaceSample {
                    t,
                    t_k: tk,
                    dw: diag.delta_w.norm(),
                    e_lambda_k: e_lambda_k.map_or(0.0, |(_, e)| e),
                    rho,
                });
                e_lambda_log.push(e_lam);
            }
        }

        // Labels for the middle of the last three states.
        history.push((z.clone(), inputs.clone()));
        if history.len() > 3 {
            history.remove(0);
        }
        if history.len() == 3 && (k - 1) % label_every == 0 {
            let t_mid = t - h;
            if t_mid < last_update {
                label_window(
                    cfg,
                    case,
                    sys,
                    &history,
                    &labeler_params,
                    &reference.sample(t_mid),
                    h,
                    lambda_noise.as_ref(),
                    &mut rng_lambda,
                    &mut rng_payload,
                    &mut rng_agent,
                    &mut payload_gp,
                    &mut agent_gps,
                )
                .map_err(|e| solver_error(t_mid, &history[1].0, e))?;
            }
        }

        if k == steps {
            break;
        }
        z = sys.step(&z, &inputs, h).map_err(|e| solver_error(t, &z, e))?;
        let period = cfg.integrator.projection_period;
        if period > 0 && (k + 1) % period == 0 {
            sys.project(&mut z).map_err(|e| solver_error(t + h, &z, e))?;
        }
        max_phi = max_phi.max(sys.constraints(&z).norm());
        max_phi_dot = max_phi_dot.max(sys.constraint_rate(&z).norm());
        if !z.payload.p.iter().all(|v| v.is_finite()) {
            return Err(solver_error(t + h, &z, Error::InvalidInput("non-finite state".into())));
        }
    }
    info!("{case}: {steps} steps in {:.2} s", timer.elapsed().as_secs_f64());

    let interface_fit = match fit_interface_constants(&interface) {
        Ok(f) => Some(f),
        Err(e) => {
            debug!("{case}: interface fit skipped: {e}");
            None
        }
    };
    let mut result = CaseResult {
        case,
        log,
        interface,
        e_lambda: e_lambda_log,
        interface_fit,
        max_phi,
        max_phi_dot,
        max_wrench_residual: max_residual,
        payload_updates: payload_gp.records().to_vec(),
        agent_updates: agent_gps.iter().map(|g| g.records().to_vec()).collect(),
        payload_model: payload_gp.model().clone(),
        agent_models: agent_gps.iter().map(|g| g.model().clone()).collect(),
        summary: Summary::default(),
    };
    result.summary = summarize(cfg, &result);
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn label_window(
    cfg: &ScenarioConfig,
    case: Case,
    sys: &CoupledSystem,
    history: &[(CoupledState, Vec<AgentInput>)],
    labeler: &crate::payload::PayloadParams,
    r_mid: &crate::control::ReferenceSample,
    h: f64,
    lambda_noise: Option<&Normal<f64>>,
    rng_lambda: &mut ChaCha8Rng,
    rng_payload: &mut ChaCha8Rng,
    rng_agent: &mut ChaCha8Rng,
    payload_gp: &mut ScheduledGp,
    agent_gps: &mut [ScheduledGp],
) -> Result<()> {
    let mid = &history[1].0;
    let avg: Vec<AgentInput> = history[0]
        .1
        .iter()
        .zip(&history[1].1)
        .map(|(a, b)| average_inputs(a, b))
        .collect();
    let mut lambda_hat = sys.solve_contact_forces(mid, &avg)?.lambda;
    if let Some(n) = lambda_noise {
        for v in lambda_hat.iter_mut() {
            *v += n.sample(rng_lambda);
        }
    }
    let window: Vec<PayloadState> = history.iter().map(|(z, _)| z.payload.clone()).collect();
    let (x, mut y) = label_payload(labeler, &window, h, &lambda_hat, r_mid, &sys.gravity)?;
    add_label_noise(&mut y, cfg.gp.sigma_meas, rng_payload);
    if case.payload_learning() {
        payload_gp.push(x, y)?;
    }
    for (j, model) in sys.agents.iter().enumerate() {
        let window: Vec<_> = history.iter().map(|(z, _)| z.agents[j].clone()).collect();
        let lams = sys.agent_contacts(&lambda_hat, j);
        let (x, mut y) = label_agent(model, &window, h, &avg[j], &lams, &sys.gravity)?;
        add_label_noise(&mut y, cfg.gp.sigma_meas, rng_agent);
        if case.agent_learning() {
            agent_gps[j].push(x, y)?;
        }
    }
    Ok(())
}

fn push_params(s: &mut Summary, prefix: &str, params: &[KernelParams]) {
    for (c, p) in params.iter().enumerate() {
        s.push(format!("{prefix}_ch{}_signal_variance", c + 1), p.signal_variance);
        s.push(format!("{prefix}_ch{}_noise_variance", c + 1), p.noise_variance);
        let ls: Vec<String> = p.length_scales.iter().map(|l| l.to_string()).collect();
        s.push(format!("{prefix}_ch{}_length_scales", c + 1), ls.join(" "));
    }
}

fn summarize(cfg: &ScenarioConfig, r: &CaseResult) -> Summary {
    let mut s = Summary::default();
    s.push("case", r.case);
    s.push("seed", cfg.seed);
    s.push("dt", cfg.integrator.dt);
    s.push("horizon", cfg.integrator.horizon);
    s.push("samples", r.log.rows.len());
    for (name, v) in r.log.rms_table() {
        s.push(format!("rms_{name}"), v);
    }
    let max_lambda = r
        .log
        .rows
        .iter()
        .flat_map(|row| row.lambda.iter().copied())
        .fold(0.0, f64::max);
    s.push("max_lambda", max_lambda);
    s.push("max_phi", r.max_phi);
    s.push("max_phi_dot", r.max_phi_dot);
    s.push("max_wrench_residual", r.max_wrench_residual);
    if let Some(f) = &r.interface_fit {
        s.push("interface_alpha", f.alpha);
        s.push("interface_gamma", f.gamma);
        s.push("interface_theta", f.theta);
        for (j, k) in f.kappa.iter().enumerate() {
            s.push(format!("interface_kappa_{}", j + 1), k);
        }
        s.push("interface_coverage", f.coverage);
        s.push("interface_violations", f.violations);
    }
    let times: Vec<String> = r.payload_updates.iter().map(|u| u.time.to_string()).collect();
    s.push("payload_gp_updates", times.join(" "));
    s.push("payload_gp_samples", r.payload_model.len());
    push_params(&mut s, "payload_gp", r.payload_model.params());
    for (j, m) in r.agent_models.iter().enumerate() {
        s.push(format!("agent{}_gp_samples", j + 1), m.len());
        push_params(&mut s, &format!("agent{}_gp", j + 1), m.params());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::config::{DisturbancePreset, ReferenceKind};

    fn short(horizon: f64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.integrator.horizon = horizon;
        cfg.gp.update_times = vec![0.5, 1.0];
        cfg.gp.budget = 30;
        cfg.gp.fit_size = 20;
        cfg.gp.fit_iterations = 5;
        cfg
    }

    #[test]
    fn exact_model_without_disturbance_tracks_hover() {
        let mut cfg = short(4.0);
        cfg.disturbance.preset = DisturbancePreset::None;
        cfg.reference.kind = ReferenceKind::Hover;
        cfg.payload.mass = cfg.payload.nominal_mass;
        cfg.payload.inertia = cfg.payload.nominal_inertia;
        let r = run_case(&cfg, Case::C1).unwrap();
        assert!(r.log.steady_rms(|row| row.e_p) < 1e-6);
        assert!(r.log.steady_rms(|row| row.dw) < 1e-6);
        assert!(r.max_phi < 1e-8);
    }

    #[test]
    fn log_is_uniform_and_finite() {
        let cfg = short(1.0);
        let r = run_case(&cfg, Case::C3).unwrap();
        assert_eq!(r.log.rows.len(), 101);
        for (i, row) in r.log.rows.iter().enumerate() {
            assert!((row.t - 0.01 * i as f64).abs() < 1e-9);
            assert_eq!(row.lambda.len(), 4);
            assert!(row.lambda.iter().chain([row.e_p, row.dw, row.sigma_l, row.sigma_a].iter()).all(|v| v.is_finite()));
        }
        assert_eq!(r.payload_updates.len(), 2);
        assert_eq!(r.agent_updates[0].len(), 2);
        assert!(!r.payload_model.is_empty());
        assert_eq!(r.summary.get("case"), Some("C3"));
    }

    #[test]
    fn nominal_case_never_learns() {
        let r = run_case(&short(1.2), Case::C1).unwrap();
        assert!(r.payload_model.is_empty() && r.agent_models.iter().all(|m| m.is_empty()));
        // Prior standard deviation of every channel is σ_f = 1.
        assert!(r.log.rows.iter().all(|row| (row.sigma_l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn eta_profile_shapes() {
        let mut cfg = ScenarioConfig::default();
        assert_eq!(eta_vector(&cfg, 6, 1.0), DVector::zeros(6));
        cfg.internal_force.profile = EtaProfile::Sine;
        let e = eta_vector(&cfg, 2, 0.0);
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 1f64.sin()).abs() < 1e-15);
    }
}
