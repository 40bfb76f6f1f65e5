//! Streaming datasets frozen at a finite list of update times.

use log::debug;

use super::fit::{fit_dataset, FitOptions};
use super::{Dataset, GpModel, KernelParams};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOptions {
    /// Strictly increasing update times; the last one is the final freeze.
    pub update_times: Vec<f64>,
    /// Maximum frozen dataset size.
    pub budget: usize,
    /// Maximum number of samples used for hyperparameter fitting.
    pub fit_size: usize,
    pub fit: FitOptions,
    /// Kernels used before the first update and whenever fitting is skipped.
    pub prior: Vec<KernelParams>,
    /// Keep the prior kernels instead of refitting at each update.
    pub fixed_hyperparameters: bool,
}

/// One completed update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub time: f64,
    pub stream_size: usize,
    pub samples: usize,
    pub params: Vec<KernelParams>,
}

/// GP whose model only changes at the scheduled update times.
#[derive(Clone, Debug)]
pub struct ScheduledGp {
    stream: Dataset,
    model: GpModel,
    options: ScheduleOptions,
    next: usize,
    records: Vec<UpdateRecord>,
}

impl ScheduledGp {
    pub fn new(in_dim: usize, out_dim: usize, options: ScheduleOptions) -> Result<Self> {
        if options.update_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Configuration("GP update times must be strictly increasing".into()));
        }
        if options.prior.len() != out_dim || options.prior.iter().any(|p| p.dim() != in_dim) {
            return Err(Error::Configuration(format!(
                "prior kernels must cover {out_dim} channels of dimension {in_dim}"
            )));
        }
        for p in &options.prior {
            p.validate()?;
        }
        Ok(ScheduledGp {
            stream: Dataset::new(in_dim, out_dim),
            model: GpModel::prior(in_dim, options.prior.clone()),
            options,
            next: 0,
            records: Vec::new(),
        })
    }

    /// Appends a sample to the live stream; the model is unaffected until
    /// the next update.
    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) -> Result<()> {
        self.stream.push(x, y)
    }

    pub fn stream_len(&self) -> usize {
        self.stream.len()
    }

    /// Frozen model for the current interval.
    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn records(&self) -> &[UpdateRecord] {
        &self.records
    }

    /// True once the last update time has passed.
    pub fn is_final(&self) -> bool {
        self.next >= self.options.update_times.len()
    }

    /// Accepts samples only until the final freeze.
    pub fn accepting(&self) -> bool {
        !self.is_final()
    }

    pub fn next_update(&self) -> Option<f64> {
        self.options.update_times.get(self.next).copied()
    }

    /// Performs every update with `t_k ≤ t` not yet done. Returns whether the
    /// model changed.
    pub fn update(&mut self, t: f64) -> Result<bool> {
        let mut changed = false;
        while let Some(tk) = self.next_update() {
            if tk > t + 1e-12 {
                break;
            }
            self.refreeze(tk)?;
            self.next += 1;
            changed = true;
        }
        Ok(changed)
    }

    fn refreeze(&mut self, tk: f64) -> Result<()> {
        let indices = farthest_point_subset(self.stream.inputs(), self.options.budget);
        let mut frozen = self.stream.subset(&indices);
        frozen.freeze(tk);
        let params = if self.options.fixed_hyperparameters || frozen.len() < 5 {
            self.options.prior.clone()
        } else {
            let fit_idx = farthest_point_subset(frozen.inputs(), self.options.fit_size);
            let fit_set = frozen.subset(&fit_idx);
            let opts = FitOptions {
                seed: self.options.fit.seed.wrapping_add(1000 * self.next as u64),
                ..self.options.fit.clone()
            };
            fit_dataset(&fit_set, &opts)?.into_iter().map(|r| r.params).collect()
        };
        self.model = GpModel::fit(&frozen, params.clone())?;
        debug!("GP frozen at t = {tk} with {} of {} samples", frozen.len(), self.stream.len());
        self.records.push(UpdateRecord {
            time: tk,
            stream_size: self.stream.len(),
            samples: frozen.len(),
            params,
        });
        Ok(())
    }
}

/// Greedy farthest-point selection of at most `budget` indices in
/// standardized feature space, starting from the sample farthest from the mean.
pub fn farthest_point_subset(inputs: &[Vec<f64>], budget: usize) -> Vec<usize> {
    let n = inputs.len();
    if n <= budget {
        return (0..n).collect();
    }
    if budget == 0 {
        return Vec::new();
    }
    let d = inputs[0].len();
    let mean: Vec<f64> = (0..d).map(|k| inputs.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|k| {
            let var = inputs.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| (0..d).map(|k| (x[k] - mean[k]) * scale[k]).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let origin = vec![0.0; d];
    let first = argmax(z.iter().map(|x| dist(x, &origin)));
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = z.iter().map(|x| dist(x, &z[first])).collect();
    while chosen.len() < budget {
        let next = argmax(nearest.iter().copied());
        chosen.push(next);
        for (i, x) in z.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(x, &z[next]));
        }
    }
    chosen.sort_unstable();
    chosen
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn options(times: Vec<f64>, budget: usize) -> ScheduleOptions {
        ScheduleOptions {
            update_times: times,
            budget,
            fit_size: 40,
            fit: FitOptions { iterations: 20, ..FitOptions::default() },
            prior: vec![KernelParams::isotropic(1, 1.0, 0.5, 0.01)],
            fixed_hyperparameters: true,
        }
    }

    #[test]
    fn empty_stream_keeps_prior() {
        let mut gp = ScheduledGp::new(1, 1, options(vec![0.0], 50)).unwrap();
        assert!(gp.update(0.0).unwrap());
        assert!(gp.model().is_empty());
        assert!(gp.is_final());
        assert_eq!(gp.model().posterior(&[0.2]).variance, vec![1.0]);
    }

    #[test]
    fn predictions_isolated_between_updates() {
        let mut gp = ScheduledGp::new(1, 1, options(vec![0.0, 1.0], 50)).unwrap();
        for k in 0..10 {
            gp.push(vec![0.1 * k as f64], vec![0.0]).unwrap();
        }
        gp.update(0.0).unwrap();
        let before = gp.model().mean(&[0.45]);
        // Outlier after t₀ must not be seen until t₁.
        gp.push(vec![0.45], vec![100.0]).unwrap();
        assert!(!gp.update(0.5).unwrap());
        assert_eq!(gp.model().mean(&[0.45]), before);
        assert!(gp.update(1.0).unwrap());
        assert!(gp.model().mean(&[0.45])[0] > 10.0);
        // After the final freeze nothing changes.
        assert!(!gp.update(100.0).unwrap());
        assert!(!gp.accepting());
    }

    #[test]
    fn budget_is_respected() {
        let mut gp = ScheduledGp::new(1, 1, options(vec![5.0], 50)).unwrap();
        for k in 0..500 {
            gp.push(vec![(k as f64 * 0.37).sin()], vec![(k as f64).cos()]).unwrap();
        }
        gp.update(5.0).unwrap();
        assert_eq!(gp.model().len(), 50);
        assert_eq!(gp.records()[0].samples, 50);
        assert_eq!(gp.records()[0].stream_size, 500);
    }

    #[test]
    fn refit_runs_when_enabled() {
        let mut opts = options(vec![1.0], 30);
        opts.fixed_hyperparameters = false;
        let mut gp = ScheduledGp::new(1, 1, opts).unwrap();
        for k in 0..60 {
            let x = 0.05 * k as f64;
            gp.push(vec![x], vec![(3.0 * x).sin()]).unwrap();
        }
        gp.update(1.0).unwrap();
        assert_ne!(gp.records()[0].params[0], KernelParams::isotropic(1, 1.0, 0.5, 0.01));
    }

    #[test]
    fn farthest_points_spread_out() {
        let pts: Vec<Vec<f64>> = (0..101).map(|k| vec![k as f64 / 100.0]).collect();
        let idx = farthest_point_subset(&pts, 3);
        assert_eq!(idx, vec![0, 50, 100]);
        assert_eq!(farthest_point_subset(&pts, 200).len(), 101);
    }

    #[test]
    fn rejects_unsorted_times() {
        assert!(ScheduledGp::new(1, 1, options(vec![2.0, 1.0], 10)).is_err());
    }
}
