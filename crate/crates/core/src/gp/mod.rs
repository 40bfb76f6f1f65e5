//! Per-channel Gaussian-process regression with squared-exponential ARD
//! kernels, confidence radii, learning labels and freeze-at-update datasets.

mod bounds;
mod fit;
mod io;
mod labels;
mod schedule;

use nalgebra::{DMatrix, DVector};

use crate::agent::AgentState;
use crate::control::ReferenceSample;
use crate::error::{Error, Result};
use crate::payload::PayloadState;

pub use bounds::{beta, confidence_split, rkhs_bound_estimate, ConfidenceBound};
pub use fit::{
    fit_dataset, fit_hyperparameters, initial_guess, log_marginal_likelihood, log_marginal_likelihood_with_gradient,
    FitOptions, FitReport,
};
pub use io::{read_dataset, write_dataset};
pub use labels::{add_label_noise, average_inputs, label_agent, label_payload, LambdaEstimate};
pub use schedule::{farthest_point_subset, ScheduleOptions, ScheduledGp, UpdateRecord};

/// Diagonal jitter added to every Gram matrix before factorization.
pub const JITTER: f64 = 1e-10;
pub const LENGTH_SCALE_MIN: f64 = 1e-3;
pub const LENGTH_SCALE_MAX: f64 = 1e3;

/// Dimension of [`payload_features`].
pub const PAYLOAD_FEATURES: usize = 20;
/// Learned payload wrench channels `(f^p, f^ω)`.
pub const PAYLOAD_CHANNELS: usize = 6;

/// Payload state `[p, v, vec R, ω]` followed by the horizontal position error.
pub fn payload_features(payload: &PayloadState, reference: &ReferenceSample) -> Vec<f64> {
    let mut f = payload.features();
    let e = payload.p - reference.p;
    f.push(e.x);
    f.push(e.y);
    f
}

/// Agent features `[vec R, x, r, ω, v, ṙ]`.
pub fn agent_features(state: &AgentState) -> Vec<f64> {
    state.features()
}

pub fn agent_feature_dim(n_joints: usize) -> usize {
    18 + 2 * n_joints
}

/// Learned agent channels `(f^x, f^ω, f^ṙ)`.
pub fn agent_channels(n_joints: usize) -> usize {
    6 + n_joints
}

/// Hyperparameters of one squared-exponential ARD kernel plus noise.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(dim: usize, signal_variance: f64, length_scale: f64, noise_variance: f64) -> Self {
        KernelParams {
            signal_variance,
            length_scales: vec![length_scale; dim],
            noise_variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::Gp(format!("signal variance {} must be positive", self.signal_variance)));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Gp(format!("noise variance {} must be positive", self.noise_variance)));
        }
        if let Some(l) = self
            .length_scales
            .iter()
            .find(|&&l| !(LENGTH_SCALE_MIN..=LENGTH_SCALE_MAX).contains(&l))
        {
            return Err(Error::Gp(format!(
                "length-scale {l} outside [{LENGTH_SCALE_MIN}, {LENGTH_SCALE_MAX}]"
            )));
        }
        Ok(())
    }

    /// `σ_f² exp(−½ Σ (x_d − y_d)²/ℓ_d²)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let s: f64 = x
            .iter()
            .zip(y)
            .zip(&self.length_scales)
            .map(|((a, b), l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * s).exp()
    }
}

pub fn kernel_eval(params: &KernelParams, x: &[f64], y: &[f64]) -> f64 {
    params.eval(x, y)
}

/// Inputs and multi-channel labels. Frozen datasets reject further samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    in_dim: usize,
    out_dim: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
    frozen_at: Option<f64>,
}

impl Dataset {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Dataset {
            in_dim,
            out_dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            frozen_at: None,
        }
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) -> Result<()> {
        if let Some(t) = self.frozen_at {
            return Err(Error::Gp(format!("dataset frozen at t = {t} cannot be extended")));
        }
        if x.len() != self.in_dim || y.len() != self.out_dim {
            return Err(Error::Gp(format!(
                "sample of size ({}, {}) does not match dataset ({}, {})",
                x.len(),
                y.len(),
                self.in_dim,
                self.out_dim
            )));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Gp("non-finite sample".into()));
        }
        self.inputs.push(x);
        self.labels.push(y);
        Ok(())
    }

    pub fn freeze(&mut self, t: f64) {
        self.frozen_at = Some(t);
    }

    pub fn frozen_at(&self) -> Option<f64> {
        self.frozen_at
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    /// Labels of channel `i`.
    pub fn channel(&self, i: usize) -> Vec<f64> {
        self.labels.iter().map(|y| y[i]).collect()
    }

    /// Unfrozen copy holding the given samples.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            frozen_at: None,
        }
    }
}

/// Predictive mean and marginal variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Posterior {
    pub fn std_dev(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// `‖Σ^{1/2}‖₂` of the diagonal covariance.
    pub fn spectral_std(&self) -> f64 {
        self.variance.iter().fold(0.0f64, |m, v| m.max(v.sqrt()))
    }
}

#[derive(Clone, Debug)]
struct Channel {
    params: KernelParams,
    /// Inputs divided by the length-scales, one row per sample.
    scaled: DMatrix<f64>,
    inv_scales: Vec<f64>,
    /// Lower Cholesky factor of `K_f + (σ² + jitter) I`.
    chol: DMatrix<f64>,
    /// `K⁻¹ y`.
    weights: DVector<f64>,
    labels: DVector<f64>,
}

impl Channel {
    fn kernel_vector(&self, x: &[f64], out: &mut DVector<f64>) {
        let n = self.scaled.nrows();
        let xs: Vec<f64> = x.iter().zip(&self.inv_scales).map(|(a, s)| a * s).collect();
        for l in 0..n {
            let mut s = 0.0;
            for (d, xd) in xs.iter().enumerate() {
                let diff = xd - self.scaled[(l, d)];
                s += diff * diff;
            }
            out[l] = self.params.signal_variance * (-0.5 * s).exp();
        }
    }
}

/// Zero-mean GP per output channel over a shared, frozen input set.
#[derive(Clone, Debug)]
pub struct GpModel {
    in_dim: usize,
    params: Vec<KernelParams>,
    channels: Vec<Channel>,
    n: usize,
}

impl GpModel {
    /// Model without data: the posterior is the prior.
    pub fn prior(in_dim: usize, params: Vec<KernelParams>) -> Self {
        GpModel {
            in_dim,
            params,
            channels: Vec::new(),
            n: 0,
        }
    }

    /// Factorizes the Gram matrix of every channel.
    pub fn fit(dataset: &Dataset, params: Vec<KernelParams>) -> Result<Self> {
        if params.len() != dataset.out_dim() {
            return Err(Error::Gp(format!(
                "{} kernels for {} output channels",
                params.len(),
                dataset.out_dim()
            )));
        }
        for p in &params {
            p.validate()?;
            if p.dim() != dataset.in_dim() {
                return Err(Error::Gp(format!(
                    "kernel of dimension {} for inputs of dimension {}",
                    p.dim(),
                    dataset.in_dim()
                )));
            }
        }
        if dataset.is_empty() {
            return Ok(Self::prior(dataset.in_dim(), params));
        }
        let n = dataset.len();
        let d = dataset.in_dim();
        let mut channels = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let inv_scales: Vec<f64> = p.length_scales.iter().map(|l| 1.0 / l).collect();
            let scaled = DMatrix::from_fn(n, d, |l, k| dataset.inputs()[l][k] * inv_scales[k]);
            let gram = gram_matrix(&scaled, p.signal_variance, p.noise_variance + JITTER);
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite(format!("Gram matrix of channel {i}")))?;
            let labels = DVector::from_vec(dataset.channel(i));
            let weights = chol.solve(&labels);
            channels.push(Channel {
                params: p.clone(),
                scaled,
                inv_scales,
                chol: chol.unpack(),
                weights,
                labels,
            });
        }
        Ok(GpModel {
            in_dim: d,
            params,
            channels,
            n,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.params.len()
    }

    /// Number of training samples.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn params(&self) -> &[KernelParams] {
        &self.params
    }

    /// Posterior mean per channel.
    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        if self.n == 0 {
            return vec![0.0; self.out_dim()];
        }
        let mut k = DVector::zeros(self.n);
        self.channels
            .iter()
            .map(|c| {
                c.kernel_vector(x, &mut k);
                k.dot(&c.weights)
            })
            .collect()
    }

    /// Posterior mean and variance per channel; variances clamped at zero.
    pub fn posterior(&self, x: &[f64]) -> Posterior {
        if self.n == 0 {
            return Posterior {
                mean: vec![0.0; self.out_dim()],
                variance: self.params.iter().map(|p| p.signal_variance).collect(),
            };
        }
        let mut k = DVector::zeros(self.n);
        let mut mean = Vec::with_capacity(self.out_dim());
        let mut variance = Vec::with_capacity(self.out_dim());
        for c in &self.channels {
            c.kernel_vector(x, &mut k);
            mean.push(k.dot(&c.weights));
            let v = c
                .chol
                .solve_lower_triangular(&k)
                .expect("Cholesky factor has a positive diagonal");
            variance.push((c.params.signal_variance - v.norm_squared()).max(0.0));
        }
        Posterior { mean, variance }
    }

    /// Realized information gain `½ log det(I + σ⁻²K_f)` per channel.
    pub fn info_gain(&self) -> Vec<f64> {
        if self.n == 0 {
            return vec![0.0; self.out_dim()];
        }
        self.channels
            .iter()
            .map(|c| {
                let logdet: f64 = c.chol.diagonal().iter().map(|l| 2.0 * l.ln()).sum();
                let noise = c.params.noise_variance + JITTER;
                (0.5 * (logdet - self.n as f64 * noise.ln())).max(0.0)
            })
            .collect()
    }

    /// `√(αᵀK_fα)`, the RKHS norm of the posterior mean, per channel.
    pub fn rkhs_norms(&self) -> Vec<f64> {
        if self.n == 0 {
            return vec![0.0; self.out_dim()];
        }
        self.channels
            .iter()
            .map(|c| {
                let noise = c.params.noise_variance + JITTER;
                let q = c.weights.dot(&c.labels) - noise * c.weights.norm_squared();
                q.max(0.0).sqrt()
            })
            .collect()
    }

    /// Log marginal likelihood of the training labels per channel.
    pub fn log_marginal_likelihood(&self) -> Vec<f64> {
        if self.n == 0 {
            return vec![0.0; self.out_dim()];
        }
        let n = self.n as f64;
        self.channels
            .iter()
            .map(|c| {
                let logdet: f64 = c.chol.diagonal().iter().map(|l| l.ln()).sum();
                -0.5 * c.labels.dot(&c.weights) - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
            })
            .collect()
    }
}

/// `σ_f² exp(−½‖x_l − x_m‖²) + diag` over rows of pre-scaled inputs.
fn gram_matrix(scaled: &DMatrix<f64>, signal_variance: f64, diag: f64) -> DMatrix<f64> {
    let n = scaled.nrows();
    let mut k = DMatrix::zeros(n, n);
    for l in 0..n {
        k[(l, l)] = signal_variance + diag;
        for m in 0..l {
            let s = (scaled.row(l) - scaled.row(m)).norm_squared();
            let v = signal_variance * (-0.5 * s).exp();
            k[(l, m)] = v;
            k[(m, l)] = v;
        }
    }
    k
}
