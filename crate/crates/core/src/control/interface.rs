//! Realization error, induced wrench mismatch and an empirical envelope
//! `‖ΔW(t)‖ ≤ α e^{−γ(t−t_k)}‖e_λ(t_k)‖ + ϑ + Σ_j κ_j ρ̄_j(t)`.

use nalgebra::{DMatrix, DVector, Vector6};

use crate::error::{Error, Result};

/// Applied versus commanded contact forces and the resulting wrench error.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizationDiagnostics {
    pub lambda_app: DVector<f64>,
    /// `e_λ = λ_app − λ_cmd`.
    pub e_lambda: DVector<f64>,
    /// `ΔW = G λ_app − W_cmd`.
    pub delta_w: Vector6<f64>,
}

pub fn wrench_mismatch(
    lambda_app: &DVector<f64>,
    lambda_cmd: &DVector<f64>,
    w_cmd: &Vector6<f64>,
    grasp: &DMatrix<f64>,
) -> Result<RealizationDiagnostics> {
    if lambda_app.len() != grasp.ncols() || lambda_cmd.len() != grasp.ncols() || grasp.nrows() != 6 {
        return Err(Error::InvalidInput(format!(
            "grasp matrix {}×{} does not match forces of length {} and {}",
            grasp.nrows(),
            grasp.ncols(),
            lambda_app.len(),
            lambda_cmd.len()
        )));
    }
    let w = grasp * lambda_app;
    Ok(RealizationDiagnostics {
        lambda_app: lambda_app.clone(),
        e_lambda: lambda_app - lambda_cmd,
        delta_w: Vector6::from_iterator(w.iter().copied()) - w_cmd,
    })
}

/// One logged sample for the envelope fit.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceSample {
    pub t: f64,
    /// Start of the current learning interval.
    pub t_k: f64,
    /// `‖ΔW(t)‖`.
    pub dw: f64,
    /// `‖e_λ(t_k)‖`.
    pub e_lambda_k: f64,
    /// `ρ̄_j(t)` per agent.
    pub rho: Vec<f64>,
}

/// Fitted envelope constants and how well they cover the log.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceFit {
    pub alpha: f64,
    pub gamma: f64,
    pub theta: f64,
    pub kappa: Vec<f64>,
    /// Fraction of samples under the fitted envelope.
    pub coverage: f64,
    /// Fraction of samples above the envelope inflated by 5%.
    pub violations: f64,
    pub samples: usize,
}

impl InterfaceFit {
    pub fn bound(&self, s: &InterfaceSample) -> f64 {
        self.alpha * (-self.gamma * (s.t - s.t_k)).exp() * s.e_lambda_k
            + self.theta
            + self.kappa.iter().zip(&s.rho).map(|(k, r)| k * r).sum::<f64>()
    }
}

const GAMMA_GRID: (f64, f64, usize) = (1e-2, 1e2, 41);
const COVER_QUANTILE: f64 = 0.95;
const INFLATION: f64 = 1.05;

/// Non-negative least squares of the envelope for each decay rate on a log
/// grid, refined by golden-section search; `ϑ` is then raised so that 95% of
/// the samples lie under the envelope.
pub fn fit_interface_constants(samples: &[InterfaceSample]) -> Result<InterfaceFit> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidInput("interface log is empty".into()));
    };
    let n_agents = first.rho.len();
    if samples.iter().any(|s| s.rho.len() != n_agents) {
        return Err(Error::InvalidInput("inconsistent number of ρ̄ traces".into()));
    }
    if samples.iter().any(|s| !(s.dw.is_finite() && s.e_lambda_k.is_finite())) {
        return Err(Error::InvalidInput("non-finite interface sample".into()));
    }
    if samples.iter().all(|s| s.dw == 0.0) {
        return Ok(InterfaceFit {
            alpha: 0.0,
            gamma: 0.0,
            theta: 0.0,
            kappa: vec![0.0; n_agents],
            coverage: 1.0,
            violations: 0.0,
            samples: samples.len(),
        });
    }
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.dw));
    let (lo, hi, count) = GAMMA_GRID;
    let step = (hi / lo).ln() / (count - 1) as f64;
    let log_gammas: Vec<f64> = (0..count).map(|i| lo.ln() + step * i as f64).collect();
    let costs: Vec<f64> = log_gammas.iter().map(|&lg| nnls_fit(samples, &y, lg.exp()).1).collect();
    let best = (0..count).fold(0, |b, i| if costs[i] < costs[b] { i } else { b });
    let a = log_gammas[best.saturating_sub(1)];
    let b = log_gammas[(best + 1).min(count - 1)];
    let log_gamma = golden_min(|lg| nnls_fit(samples, &y, lg.exp()).1, a, b, 60);
    let gamma = log_gamma.exp();
    let (coef, _) = nnls_fit(samples, &y, gamma);
    let mut fit = InterfaceFit {
        alpha: coef[0],
        gamma,
        theta: coef[1],
        kappa: coef[2..].to_vec(),
        coverage: 0.0,
        violations: 0.0,
        samples: samples.len(),
    };
    let mut residuals: Vec<f64> = samples.iter().map(|s| s.dw - fit.bound(s)).collect();
    residuals.sort_by(f64::total_cmp);
    let q = residuals[((COVER_QUANTILE * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1];
    if q > 0.0 {
        fit.theta += q;
    }
    let n = samples.len() as f64;
    fit.coverage = samples.iter().filter(|s| s.dw <= fit.bound(s)).count() as f64 / n;
    fit.violations = samples.iter().filter(|s| s.dw > INFLATION * fit.bound(s)).count() as f64 / n;
    Ok(fit)
}

fn design(samples: &[InterfaceSample], gamma: f64) -> DMatrix<f64> {
    let cols = 2 + samples[0].rho.len();
    DMatrix::from_fn(samples.len(), cols, |i, c| {
        let s = &samples[i];
        match c {
            0 => (-gamma * (s.t - s.t_k)).exp() * s.e_lambda_k,
            1 => 1.0,
            _ => s.rho[c - 2],
        }
    })
}

/// Non-negative least squares by enumerating active sets (few columns).
fn nnls_fit(samples: &[InterfaceSample], y: &DVector<f64>, gamma: f64) -> (Vec<f64>, f64) {
    let a = design(samples, gamma);
    let cols = a.ncols();
    let mut best = (vec![0.0; cols], y.norm_squared());
    for mask in 1u32..(1 << cols) {
        let active: Vec<usize> = (0..cols).filter(|c| mask & (1 << c) != 0).collect();
        let sub = a.select_columns(active.iter());
        let svd = sub.clone().svd(true, true);
        let tol = 1e-12 * svd.singular_values.max();
        let Ok(x) = svd.solve(y, tol) else {
            continue;
        };
        if x.iter().any(|&v| v < 0.0) {
            continue;
        }
        let cost = (&sub * &x - y).norm_squared();
        if cost < best.1 {
            let mut full = vec![0.0; cols];
            for (k, &c) in active.iter().enumerate() {
                full[c] = x[k];
            }
            best = (full, cost);
        }
    }
    best
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iterations: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iterations {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        c
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::allocation::nullspace_basis;
    use crate::liegroup::exp_so3;
    use crate::payload::{grasp_matrix, PayloadParams};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grasp() -> DMatrix<f64> {
        grasp_matrix(&exp_so3(&Vector3::new(0.2, -0.1, 0.7)), &PayloadParams::plate_default().attachments)
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0))
    }

    #[test]
    fn exact_realization_has_no_mismatch() {
        let g = grasp();
        let lam = random_vec(12, 1);
        let w = Vector6::from_iterator((&g * &lam).iter().copied());
        let d = wrench_mismatch(&lam, &lam, &w, &g).unwrap();
        assert!(d.delta_w.norm() < 1e-12);
        assert_eq!(d.e_lambda.norm(), 0.0);
    }

    #[test]
    fn internal_force_error_is_invisible() {
        let g = grasp();
        let lam = random_vec(12, 2);
        let w = Vector6::from_iterator((&g * &lam).iter().copied());
        let basis = nullspace_basis(&g);
        assert_eq!(basis.ncols(), 6);
        let app = &lam + &basis * random_vec(6, 3);
        let d = wrench_mismatch(&app, &lam, &w, &g).unwrap();
        assert!(d.delta_w.norm() < 1e-12);
        assert!(d.e_lambda.norm() > 1.0);
    }

    #[test]
    fn mismatch_equals_grasp_times_error() {
        let g = grasp();
        let cmd = random_vec(12, 4);
        let app = random_vec(12, 5);
        let w = Vector6::from_iterator((&g * &cmd).iter().copied());
        let d = wrench_mismatch(&app, &cmd, &w, &g).unwrap();
        let other = &g * &d.e_lambda;
        assert!((DVector::from_column_slice(d.delta_w.as_slice()) - other).amax() < 1e-12);
        assert!(wrench_mismatch(&app.rows(0, 9).into_owned(), &cmd, &w, &g).is_err());
    }

    fn synthetic(alpha: f64, gamma: f64, theta: f64, kappa: [f64; 2]) -> Vec<InterfaceSample> {
        let mut out = Vec::new();
        for (k, (tk, e)) in [(0.0, 3.0), (4.0, 1.5), (8.0, 0.7)].iter().enumerate() {
            for i in 0..400 {
                let t = tk + 0.01 * i as f64;
                let rho = vec![0.5 + 0.4 * (0.7 * t).sin(), 0.3 + 0.2 * (1.3 * t + k as f64).cos()];
                let dw = alpha * (-gamma * (t - tk)).exp() * e + theta + kappa[0] * rho[0] + kappa[1] * rho[1];
                out.push(InterfaceSample { t, t_k: *tk, dw, e_lambda_k: *e, rho });
            }
        }
        out
    }

    #[test]
    fn synthetic_envelope_recovered() {
        let log = synthetic(2.0, 1.5, 0.1, [0.5, 0.3]);
        let fit = fit_interface_constants(&log).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(fit.alpha, 2.0) < 0.01, "{fit:?}");
        assert!(rel(fit.gamma, 1.5) < 0.01, "{fit:?}");
        assert!(rel(fit.theta, 0.1) < 0.01, "{fit:?}");
        assert!(rel(fit.kappa[0], 0.5) < 0.01 && rel(fit.kappa[1], 0.3) < 0.01, "{fit:?}");
        assert_eq!(fit.violations, 0.0);
        assert!(fit.coverage >= 0.95);
    }

    #[test]
    fn noisy_log_is_covered() {
        let mut log = synthetic(1.0, 0.8, 0.2, [0.1, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in &mut log {
            s.dw *= 1.0 + 0.1 * rng.random_range(-1.0..1.0);
        }
        let fit = fit_interface_constants(&log).unwrap();
        assert!(fit.coverage >= 0.95);
        assert!(fit.alpha >= 0.0 && fit.theta >= 0.0 && fit.kappa.iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn zero_log_gives_zero_constants() {
        let log: Vec<InterfaceSample> = (0..10)
            .map(|i| InterfaceSample { t: i as f64, t_k: 0.0, dw: 0.0, e_lambda_k: 0.0, rho: vec![1.0, 1.0] })
            .collect();
        let fit = fit_interface_constants(&log).unwrap();
        assert_eq!((fit.alpha, fit.gamma, fit.theta), (0.0, 0.0, 0.0));
        assert_eq!(fit.kappa, vec![0.0, 0.0]);
        assert!(fit_interface_constants(&[]).is_err());
    }
}
