use thiserror::Error;

/// Errors produced by the identification pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SindyError {
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("benchmark `{system}` has no parameter `{param}`")]
    UnknownParameter { system: String, param: String },

    #[error("non-finite state encountered at integration step {step}")]
    NonFiniteState { step: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite library value in column {column}, row {row}")]
    NonFiniteColumn { column: usize, row: usize },

    #[error("domain error in column {column}, row {row}: {reason}")]
    Domain {
        column: usize,
        row: usize,
        reason: &'static str,
    },

    #[error("loss diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = SindyError> = std::result::Result<T, E>;
