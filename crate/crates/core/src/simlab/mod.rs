//! Experiment harness: scenario configuration, the closed-loop runner for the
//! three controller configurations, payload-only studies, metrics emission
//! and the invariant suite behind the `validate` command.

mod config;
mod emit;
mod experiments;
mod payload_only;
mod runner;
pub mod validate;

use std::fmt;
use std::str::FromStr;

pub use config::{
    AgentConfig, ControlConfig, DisturbanceConfig, DisturbancePreset, EtaProfile, GpConfig, IntegratorConfig,
    InternalForceConfig, InternalMode, PayloadConfig, ReferenceConfig, ReferenceKind, ScenarioConfig,
};
pub use emit::{
    metrics_header, read_interface, read_metrics, write_case, write_comparison, write_figures, write_interface, write_metrics,
    write_summary,
};
pub use experiments::{coverage_experiment, run_matrix, CoverageReport, MatrixResult};
pub use payload_only::{
    eta_experiment, linear_decay_rate, nominal_decay_experiment, payload_step, DecayReport, EtaReport,
};
pub use runner::{eta_vector, run_case, CaseResult};

use crate::error::{Error, Result};

/// Controller configuration of one closed-loop run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Case {
    /// Nominal control, no learning.
    C1,
    /// Payload learning only.
    C2,
    /// Payload and agent learning.
    C3,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::C1, Case::C2, Case::C3];

    pub fn payload_learning(self) -> bool {
        !matches!(self, Case::C1)
    }

    pub fn agent_learning(self) -> bool {
        matches!(self, Case::C3)
    }

    pub fn name(self) -> &'static str {
        match self {
            Case::C1 => "C1",
            Case::C2 => "C2",
            Case::C3 => "C3",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(Case::C1),
            "C2" => Ok(Case::C2),
            "C3" => Ok(Case::C3),
            _ => Err(Error::Configuration(format!("unknown case {s:?}; expected C1, C2 or C3"))),
        }
    }
}

/// One logged sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    pub e_p: f64,
    pub e_v: f64,
    pub e_r: f64,
    pub e_omega: f64,
    pub psi: f64,
    /// `‖ΔW‖`.
    pub dw: f64,
    pub sigma_l: f64,
    pub sigma_a: f64,
    /// `‖λ_app‖` per contact, λ order.
    pub lambda: Vec<f64>,
    pub eta: f64,
    /// `‖Φ(z)‖`.
    pub phi: f64,
}

impl MetricsRow {
    fn scalars(&self) -> [(&'static str, f64); 9] {
        [
            ("e_p", self.e_p),
            ("e_v", self.e_v),
            ("e_R", self.e_r),
            ("e_omega", self.e_omega),
            ("Psi", self.psi),
            ("dW", self.dw),
            ("sigma_L", self.sigma_l),
            ("sigma_A", self.sigma_a),
            ("eta", self.eta),
        ]
    }
}

/// Uniformly sampled metrics of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    /// Contacts per agent, used to name the force columns.
    pub contacts_per_agent: Vec<usize>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// Rows in the last quarter of the horizon.
    pub fn steady_state(&self) -> &[MetricsRow] {
        let n = self.rows.len();
        &self.rows[n - n / 4..]
    }

    /// Root mean square of a column over the last quarter of the horizon.
    pub fn steady_rms(&self, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        rms(self.steady_state().iter().map(f))
    }

    /// Steady-state RMS of every scalar metric, in column order.
    pub fn rms_table(&self) -> Vec<(&'static str, f64)> {
        let tail = self.steady_state();
        if tail.is_empty() {
            return Vec::new();
        }
        (0..9)
            .map(|i| (tail[0].scalars()[i].0, rms(tail.iter().map(|r| r.scalars()[i].1))))
            .collect()
    }
}

/// RMS of a sequence, 0 when empty.
pub fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Ordered key/value run summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
