use thiserror::Error;

/// Errors raised by the optimizer toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SengError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("shape mismatch at layer {layer}: {message}")]
    Structure { layer: usize, message: String },

    #[error("stale activation cache: built for parameter version {cache}, network is at {current}")]
    StaleCache { cache: u64, current: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("non-finite value {value} at step {step}")]
    NonFinite { step: u64, value: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("diverged at step {step}: residual {residual} exceeds 10x initial {initial}")]
    Diverged {
        step: usize,
        residual: f64,
        initial: f64,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl SengError {
    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            SengError::Parameter(_) => "parameter",
            SengError::NotPositiveDefinite { .. } => "not_positive_definite",
            SengError::Structure { .. } => "structure",
            SengError::StaleCache { .. } => "stale_cache",
            SengError::Degenerate(_) => "degenerate",
            SengError::Format { .. } => "format",
            SengError::NonFinite { .. } => "non_finite",
            SengError::Protocol(_) => "protocol",
            SengError::Generation(_) => "generation",
            SengError::Diverged { .. } => "diverged",
            SengError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for SengError {
    fn from(e: std::io::Error) -> Self {
        SengError::Io(e.to_string())
    }
}

impl From<csv::Error> for SengError {
    fn from(e: csv::Error) -> Self {
        SengError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SengError>;
