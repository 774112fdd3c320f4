use crate::model::TabularLM;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid sequence: {0}")]
    Sequence(String),

    /// A context key has no parameter row. Indicates a model/vocabulary mismatch.
    #[error("no logit row for context key {key:?}")]
    UnknownContext { key: Vec<u32> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("refusing to enumerate {size}^{max_len} sequences: bound is {bound}")]
    EnumerationTooLarge {
        size: usize,
        max_len: usize,
        bound: u64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible models: {0}")]
    Mismatch(String),

    #[error("inconsistent trajectory: {0}")]
    InconsistentTrajectory(String),

    #[error("quadrature check failed: {0}")]
    Quadrature(String),

    /// `b(y) = 0` where `a(y) > 0`: the divergence is infinite.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("undefined: {0}")]
    Undefined(String),

    /// Training produced a non-finite loss or gradient. `last_good` holds the
    /// most recent finite parameters.
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted {
        step: usize,
        reason: String,
        last_good: Box<TabularLM>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
