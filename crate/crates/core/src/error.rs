use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} out of range: {value} (valid {min}..={max})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("Newton-Schulz iteration {iteration} produced a non-finite entry")]
    NewtonSchulzBlowup { iteration: usize },

    #[error(
        "step polynomial fit at sigma_k={sigma_k} missed tolerance: max deviation high={max_dev_high:.4}, low={max_dev_low:.4}"
    )]
    FitFailed {
        sigma_k: f64,
        max_dev_high: f64,
        max_dev_low: f64,
    },

    #[error("overlap is undefined for a zero gradient")]
    ZeroGradient,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
