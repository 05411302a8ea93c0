use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: ({n_a}, L={l_a}) vs ({n_b}, L={l_b})")]
    GridMismatch {
        n_a: usize,
        l_a: f64,
        n_b: usize,
        l_b: f64,
    },

    #[error("malformed field: {0}")]
    Structure(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("trilinear exponents rejected: {0}")]
    InvalidExponents(String),

    #[error("time step {dt:e} exceeds the advective limit {dt_max:e}")]
    TimeStepTooLarge { dt: f64, dt_max: f64 },

    #[error("state outside the required set: {0}")]
    Membership(String),

    #[error("certificate is infeasible (gamma = {gamma:e} >= 1, nu_min = {nu_min:e})")]
    Infeasible { gamma: f64, nu_min: f64 },

    #[error("forcing does not declare Hoelder data")]
    MissingHoelder,

    #[error("trajectory sampled too sparsely: {0}")]
    SparseSampling(String),

    #[error("parse error in {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
