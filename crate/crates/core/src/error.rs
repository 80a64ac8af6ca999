use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no subjects at risk at residual time {time}")]
    EmptyRiskSet { time: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix has a materially negative eigenvalue {value:e} (largest {largest:e})")]
    NotPsd { value: f64, largest: f64 },

    #[error("slope matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("degenerate quadratic form: {0}")]
    Degenerate(String),

    #[error("simulation: {0}")]
    Simulation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
