use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the closed unit cell")]
    OutsideCell { point: Vec<f64> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("tensor at {location} is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { location: String, min_eig: f64 },

    #[error("coefficient validation failed: {0}")]
    Validation(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value detected at step {step}")]
    NonFinite { step: usize },

    #[error("exchange system singular at step {step} (1 + 2 dt a = {det:e})")]
    SingularExchange { step: usize, det: f64 },

    #[error("noise path partition mismatch: {0}")]
    PartitionMismatch(String),

    #[error("run failed at epsilon={epsilon}, replica={replica}: {source}")]
    Replica {
        epsilon: f64,
        replica: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
