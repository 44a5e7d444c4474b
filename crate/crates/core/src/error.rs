use thiserror::Error;

/// Errors raised by the focus engine and its collaborators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("query has no {0} tokens")]
    EmptyModality(&'static str),
    #[error("segment {index} has non-positive area {area}")]
    NonPositiveArea { index: usize, area: f64 },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("candidate pool needs at least {needed} candidates, got {got}")]
    PoolTooSmall { needed: usize, got: usize },
    #[error("rankings cover different candidate pools")]
    PoolMismatch,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("timed out waiting for a response")]
    Timeout,
    #[error("remote error for sample {sample_id}: {message}")]
    Remote { sample_id: String, message: String },
    #[error("{n} tokens exceed the exhaustive limit of {max}")]
    TooManyTokens { n: usize, max: usize },
    #[error("state preserves no tokens")]
    DegenerateState,
    #[error("sample {0} has no unique positive candidate")]
    MissingPositive(String),
    #[error("generation failed at stage {stage}: {message}")]
    GenerationFailed { stage: &'static str, message: String },
    #[error("source {0} exhausted")]
    SourceExhausted(usize),
    #[error("need {needed} in-sample negatives, only {available} available")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("loss diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Transport-level failures that a client may retry on a fresh connection.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Timeout | Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
