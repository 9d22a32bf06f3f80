use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (schedule parameters, kernel sizes, step sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A timestep or step target outside `0..=T`.
    #[error("step index {index} out of range 0..={max}")]
    Index { index: i64, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// Dataset content problems: empty collections, missing metadata, unreadable rasters.
    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("denoiser does not provide input gradients")]
    NotDifferentiable,

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("correlation undefined: zero variance input")]
    DegenerateCorrelation,

    #[error("histogram error: {0}")]
    Histogram(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
