//! Multi-run studies: the C1–C3 matrix and the Monte-Carlo coverage check of
//! the learned confidence tube.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ScenarioConfig;
use super::runner::{run_case, stream, CaseResult};
use super::Case;
use crate::control::Reference;
use crate::error::{Error, Result};
use crate::gp::{fit_dataset, payload_features, ConfidenceBound, Dataset, GpModel, PAYLOAD_CHANNELS, PAYLOAD_FEATURES};
use crate::liegroup::{exp_so3, Rotation};
use crate::payload::PayloadState;

const STREAM_COVERAGE: u64 = 16;

#[derive(Clone, Debug)]
pub struct MatrixResult {
    pub results: Vec<CaseResult>,
}

impl MatrixResult {
    pub fn case(&self, case: Case) -> Option<&CaseResult> {
        self.results.iter().find(|r| r.case == case)
    }
}

/// Runs C1, C2 and C3 in order under identical seeds.
pub fn run_matrix(cfg: &ScenarioConfig) -> Result<MatrixResult> {
    let results = Case::ALL
        .iter()
        .map(|&c| run_case(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixResult { results })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    pub runs: usize,
    pub queries_per_run: usize,
    /// Fraction of all query points with `‖f(x) − μ(x)‖ ≤ ρ̄(x)`.
    pub coverage: f64,
    /// Smallest per-run coverage.
    pub worst_run: f64,
    pub mean_beta: f64,
}

fn random_payload_state<R: Rng>(rng: &mut R, center: &Vector3<f64>) -> PayloadState {
    let mut u = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    PayloadState {
        p: center + u(0.6),
        v: u(0.8),
        rot: exp_so3(&u(0.15)),
        omega: u(0.5),
    }
}

/// For each run: `train` random payload states labelled with the true payload
/// disturbance plus `N(0, σ_meas²)` noise, a maximum-likelihood GP fit, and
/// `queries` fresh states checked against `ρ̄(·; δ)`.
pub fn coverage_experiment(
    cfg: &ScenarioConfig,
    runs: usize,
    train: usize,
    queries: usize,
    delta: f64,
) -> Result<CoverageReport> {
    if runs == 0 || queries == 0 {
        return Err(Error::InvalidInput("coverage needs at least one run and one query".into()));
    }
    let sys = cfg.build_system()?;
    let dist = &sys.payload_disturbance;
    let c = cfg.reference.center;
    let center = Vector3::new(c[0], c[1], c[2]);
    let reference = Reference::Hover {
        p: center,
        rot: Rotation::identity(),
    }
    .sample(0.0);
    let truth = |s: &PayloadState| {
        let (f, t) = dist.evaluate(s);
        [f.x, f.y, f.z, t.x, t.y, t.z]
    };
    let mut rng = stream(cfg.seed, STREAM_COVERAGE);
    let noise = Normal::new(0.0, cfg.gp.sigma_meas.max(1e-12)).map_err(|e| Error::Configuration(e.to_string()))?;
    let mut fit = cfg.fit_options();
    let (mut covered, mut worst, mut beta_sum) = (0usize, f64::INFINITY, 0.0);
    for run in 0..runs {
        let mut data = Dataset::new(PAYLOAD_FEATURES, PAYLOAD_CHANNELS);
        for _ in 0..train {
            let s = random_payload_state(&mut rng, &center);
            let y: Vec<f64> = truth(&s).iter().map(|v| v + noise.sample(&mut rng)).collect();
            data.push(payload_features(&s, &reference), y)?;
        }
        fit.seed = cfg.seed.wrapping_add(run as u64);
        let params = fit_dataset(&data, &fit)?.into_iter().map(|r| r.params).collect();
        let model = GpModel::fit(&data, params)?;
        let bound = ConfidenceBound::new(&model, delta, None)?;
        beta_sum += bound.beta.iter().sum::<f64>() / bound.beta.len() as f64;
        let mut hits = 0;
        for _ in 0..queries {
            let s = random_payload_state(&mut rng, &center);
            let x = payload_features(&s, &reference);
            let mean = model.mean(&x);
            let err = truth(&s).iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if err <= bound.rho(&model, &x) {
                hits += 1;
            }
        }
        covered += hits;
        worst = worst.min(hits as f64 / queries as f64);
    }
    Ok(CoverageReport {
        runs,
        queries_per_run: queries,
        coverage: covered as f64 / (runs * queries) as f64,
        worst_run: worst,
        mean_beta: beta_sum / runs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_small_run() {
        let cfg = ScenarioConfig::default();
        let rep = coverage_experiment(&cfg, 3, 30, 20, 0.9).unwrap();
        assert_eq!(rep.runs, 3);
        assert!(rep.coverage >= 0.9, "{rep:?}");
        assert!(rep.mean_beta > 0.0);
    }
}
