//! Marginal-likelihood hyperparameter fitting (Adam in log-parameter space).

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, KernelParams, JITTER, LENGTH_SCALE_MAX, LENGTH_SCALE_MIN};
use crate::error::{Error, Result};

const SIGNAL_BOUNDS: (f64, f64) = (1e-6, 1e6);
const NOISE_BOUNDS: (f64, f64) = (1e-8, 1e4);

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub length_scale_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 4,
            iterations: 60,
            learning_rate: 0.1,
            length_scale_bounds: (LENGTH_SCALE_MIN, LENGTH_SCALE_MAX),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub params: KernelParams,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub improved: bool,
}

/// Data-driven starting point: length-scales at the feature spread, signal
/// variance at the label power, noise at a tenth of it.
pub fn initial_guess(inputs: &[Vec<f64>], y: &[f64]) -> KernelParams {
    let n = inputs.len().max(1) as f64;
    let d = inputs.first().map_or(0, |x| x.len());
    let length_scales = (0..d)
        .map(|k| {
            let mean = inputs.iter().map(|x| x[k]).sum::<f64>() / n;
            let var = inputs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt().clamp(0.05, 100.0)
        })
        .collect();
    let power = (y.iter().map(|v| v * v).sum::<f64>() / n).max(1e-6);
    KernelParams {
        signal_variance: power,
        length_scales,
        noise_variance: (0.1 * power).max(NOISE_BOUNDS.0),
    }
}

/// Pairwise squared coordinate differences, one `n×n` matrix per dimension.
struct Differences {
    per_dim: Vec<DMatrix<f64>>,
}

impl Differences {
    fn new(inputs: &[Vec<f64>]) -> Self {
        let n = inputs.len();
        let d = inputs.first().map_or(0, |x| x.len());
        let per_dim = (0..d)
            .map(|k| DMatrix::from_fn(n, n, |l, m| (inputs[l][k] - inputs[m][k]).powi(2)))
            .collect();
        Differences { per_dim }
    }

    fn kernel(&self, params: &KernelParams) -> DMatrix<f64> {
        let n = self.per_dim.first().map_or(0, |m| m.nrows());
        let mut s = DMatrix::zeros(n, n);
        for (dk, l) in self.per_dim.iter().zip(&params.length_scales) {
            s += dk / (l * l);
        }
        s.map(|v| params.signal_variance * (-0.5 * v).exp())
    }
}

fn check(inputs: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<()> {
    if inputs.len() != y.len() {
        return Err(Error::Gp(format!("{} inputs but {} labels", inputs.len(), y.len())));
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != params.dim()) {
        return Err(Error::Gp(format!(
            "input of dimension {} for a kernel of dimension {}",
            x.len(),
            params.dim()
        )));
    }
    Ok(())
}

pub fn log_marginal_likelihood(inputs: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<f64> {
    check(inputs, y, params)?;
    lml(&Differences::new(inputs), y, params, false).map(|(v, _)| v)
}

/// Log marginal likelihood and its gradient with respect to
/// `(log σ_f², log ℓ_1, …, log ℓ_d, log σ²)`.
pub fn log_marginal_likelihood_with_gradient(
    inputs: &[Vec<f64>],
    y: &[f64],
    params: &KernelParams,
) -> Result<(f64, Vec<f64>)> {
    check(inputs, y, params)?;
    lml(&Differences::new(inputs), y, params, true)
}

fn lml(diff: &Differences, y: &[f64], params: &KernelParams, gradient: bool) -> Result<(f64, Vec<f64>)> {
    let n = y.len();
    let kf = diff.kernel(params);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += params.noise_variance + JITTER;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Gram matrix during hyperparameter fit".into()))?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|l| l.ln()).sum();
    let value = -0.5 * yv.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !gradient {
        return Ok((value, Vec::new()));
    }
    // ∂L/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ).
    let q = &alpha * alpha.transpose() - chol.inverse();
    let qk = q.component_mul(&kf);
    let mut grad = Vec::with_capacity(params.dim() + 2);
    grad.push(0.5 * qk.sum());
    for (dk, l) in diff.per_dim.iter().zip(&params.length_scales) {
        grad.push(0.5 * qk.dot(dk) / (l * l));
    }
    grad.push(0.5 * params.noise_variance * q.trace());
    Ok((value, grad))
}

fn to_log(p: &KernelParams) -> Vec<f64> {
    let mut t = vec![p.signal_variance.ln()];
    t.extend(p.length_scales.iter().map(|l| l.ln()));
    t.push(p.noise_variance.ln());
    t
}

fn from_log(t: &[f64]) -> KernelParams {
    let d = t.len() - 2;
    KernelParams {
        signal_variance: t[0].exp(),
        length_scales: t[1..=d].iter().map(|v| v.exp()).collect(),
        noise_variance: t[d + 1].exp(),
    }
}

fn clamp_log(t: &mut [f64], options: &FitOptions) {
    let d = t.len() - 2;
    t[0] = t[0].clamp(SIGNAL_BOUNDS.0.ln(), SIGNAL_BOUNDS.1.ln());
    let (lo, hi) = options.length_scale_bounds;
    for v in &mut t[1..=d] {
        *v = v.clamp(lo.ln(), hi.ln());
    }
    t[d + 1] = t[d + 1].clamp(NOISE_BOUNDS.0.ln(), NOISE_BOUNDS.1.ln());
}

/// Multi-start gradient ascent of the log marginal likelihood. The first
/// start is `initial`; the others perturb it by up to one log unit. The best
/// parameters seen, including `initial`, are returned.
pub fn fit_hyperparameters(
    inputs: &[Vec<f64>],
    y: &[f64],
    initial: &KernelParams,
    options: &FitOptions,
) -> Result<FitReport> {
    check(inputs, y, initial)?;
    if inputs.len() < 5 {
        return Err(Error::Gp(format!(
            "hyperparameter fitting needs at least 5 samples, got {}",
            inputs.len()
        )));
    }
    let diff = Differences::new(inputs);
    let mut t0 = to_log(initial);
    clamp_log(&mut t0, options);
    let start = from_log(&t0);
    let initial_value = lml(&diff, y, &start, false)?.0;
    let mut best = (initial_value, start.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for s in 0..options.starts.max(1) {
        let mut t = t0.clone();
        if s > 0 {
            for v in &mut t {
                *v += rng.random_range(-1.0..1.0);
            }
            clamp_log(&mut t, options);
        }
        let mut m = vec![0.0; t.len()];
        let mut v = vec![0.0; t.len()];
        for it in 0..options.iterations {
            let params = from_log(&t);
            let Ok((value, grad)) = lml(&diff, y, &params, true) else {
                break;
            };
            if value > best.0 {
                best = (value, params);
            }
            let k = (it + 1) as i32;
            for i in 0..t.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - b1.powi(k));
                let vh = v[i] / (1.0 - b2.powi(k));
                t[i] += options.learning_rate * mh / (vh.sqrt() + eps);
            }
            clamp_log(&mut t, options);
        }
        let params = from_log(&t);
        if let Ok((value, _)) = lml(&diff, y, &params, false) {
            if value > best.0 {
                best = (value, params);
            }
        }
    }
    let improved = best.0 > initial_value;
    if !improved {
        warn!("hyperparameter fit did not improve on the initial guess");
    }
    Ok(FitReport {
        params: best.1,
        log_likelihood: best.0,
        initial_log_likelihood: initial_value,
        improved,
    })
}

/// Fits every channel of a dataset from its own data-driven initial guess.
pub fn fit_dataset(dataset: &Dataset, options: &FitOptions) -> Result<Vec<FitReport>> {
    (0..dataset.out_dim())
        .map(|c| {
            let y = dataset.channel(c);
            let init = initial_guess(dataset.inputs(), &y);
            let opts = FitOptions {
                seed: options.seed.wrapping_add(c as u64),
                ..options.clone()
            };
            fit_hyperparameters(dataset.inputs(), &y, &init, &opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_gp(n: usize, params: &KernelParams, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..10.0)]).collect();
        let kf = Differences::new(&inputs).kernel(params);
        let l = (kf + DMatrix::identity(n, n) * 1e-8).cholesky().unwrap().unpack();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let f = l * z;
        let y = (0..n)
            .map(|i| f[i] + params.noise_variance.sqrt() * { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect();
        (inputs, y)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let truth = KernelParams { signal_variance: 1.0, length_scales: vec![0.5], noise_variance: 0.01 };
        let (x, y) = sample_gp(30, &truth, 1);
        let p = KernelParams { signal_variance: 0.7, length_scales: vec![0.8], noise_variance: 0.05 };
        let (_, g) = log_marginal_likelihood_with_gradient(&x, &y, &p).unwrap();
        let t = to_log(&p);
        for i in 0..t.len() {
            let h = 1e-6;
            let mut tp = t.clone();
            let mut tm = t.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (log_marginal_likelihood(&x, &y, &from_log(&tp)).unwrap()
                - log_marginal_likelihood(&x, &y, &from_log(&tm)).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn recovers_generating_hyperparameters() {
        let truth = KernelParams { signal_variance: 1.0, length_scales: vec![0.5], noise_variance: 0.01 };
        let (x, y) = sample_gp(200, &truth, 7);
        let init = initial_guess(&x, &y);
        let opts = FitOptions { iterations: 150, ..FitOptions::default() };
        let report = fit_hyperparameters(&x, &y, &init, &opts).unwrap();
        assert!(report.log_likelihood >= report.initial_log_likelihood);
        // The maximizer must score at least as well as the generating point.
        let at_truth = log_marginal_likelihood(&x, &y, &truth).unwrap();
        assert!(report.log_likelihood >= at_truth - 1e-6, "{} < {at_truth}", report.log_likelihood);
        // Signal variance is weakly identified from one path; check ℓ and σ².
        let got = to_log(&report.params);
        let want = to_log(&truth);
        for i in 1..3 {
            assert!((got[i] - want[i]).abs() < 0.3, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn pure_noise_prefers_long_length_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = (0..60).map(|_| 0.1 * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
        let init = initial_guess(&x, &y);
        let opts = FitOptions { iterations: 200, ..FitOptions::default() };
        let report = fit_hyperparameters(&x, &y, &init, &opts).unwrap();
        let p = &report.params;
        assert!(p.length_scales.iter().all(|&l| l <= LENGTH_SCALE_MAX));
        // No structure: either the signal vanishes or it becomes flat.
        let flat = p.length_scales.iter().all(|&l| l > 10.0);
        assert!(p.signal_variance < 0.1 * p.noise_variance || flat, "{p:?}");
        assert!((p.noise_variance / 0.01).ln().abs() < 0.5, "{p:?}");
    }

    #[test]
    fn never_worse_than_initial() {
        let truth = KernelParams { signal_variance: 2.0, length_scales: vec![1.5], noise_variance: 0.1 };
        let (x, y) = sample_gp(25, &truth, 5);
        let opts = FitOptions { iterations: 3, ..FitOptions::default() };
        let report = fit_hyperparameters(&x, &y, &truth, &opts).unwrap();
        assert!(report.log_likelihood >= report.initial_log_likelihood);
        assert!(fit_hyperparameters(&x[..4], &y[..4], &truth, &opts).is_err());
    }
}
