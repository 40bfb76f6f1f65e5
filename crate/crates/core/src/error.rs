use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not antisymmetric (symmetric part norm {0:.3e})")]
    NotAntisymmetric(f64),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("mass matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular grasp: constraint Jacobian is rank deficient ({0})")]
    SingularGrasp(String),

    #[error("allocation failed: leader grasp block has rank {rank} < 6 (condition {condition:.3e})")]
    Allocation { rank: usize, condition: f64 },

    #[error("infeasible grasp geometry: Newton projection did not converge (residual {residual:.3e})")]
    InfeasibleGeometry { residual: f64 },

    #[error("gaussian process: {0}")]
    Gp(String),

    #[error("solver failure at t = {t:.4} s: {message}")]
    Solver { t: f64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised by the numerical solvers rather than by bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Solver { .. }
                | Error::SingularGrasp(_)
                | Error::NotPositiveDefinite(_)
                | Error::InfeasibleGeometry { .. }
                | Error::Allocation { .. }
                | Error::Gp(_)
        )
    }
}
