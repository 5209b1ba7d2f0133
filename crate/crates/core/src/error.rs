use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid vector: {0}")]
    InvalidVector(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    ConvergenceFailure { sweeps: usize, residual: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("oracle unavailable: sample carries no hidden causal factors")]
    OracleUnavailable,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("adaptation diverged: objective is not finite")]
    AdaptDiverged,

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("eta undefined: |gamma_{index}| = {value:e} is below the cutoff")]
    EtaUndefined { index: usize, value: f64 },

    #[error("rejection sampler exhausted after {draws} draws")]
    SamplingExhausted { draws: usize },

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("stream audit: {0}")]
    StreamAudit(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user-supplied configuration or input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidInput(_)
                | Error::InvalidMatrix(_)
                | Error::InvalidVector(_)
                | Error::VersionMismatch { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
