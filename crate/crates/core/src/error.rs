use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("oracle requires frozen randomness")]
    NonDeterministicLoss,

    #[error("epsilon {0} outside [1e-7, 1e-3]")]
    EpsilonOutOfRange(f64),

    #[error("empty text condition")]
    EmptyText,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("temporal table too small: {needed} frames, table has {available} rows")]
    TemporalTableTooSmall { needed: usize, available: usize },

    #[error("nonpositive temperature")]
    NonPositiveTemperature,

    #[error("mask_tokens must force ≥1 masked position")]
    NoMaskedPositions,

    #[error("non-finite loss term `{0}`")]
    NonFiniteTerm(&'static str),

    #[error("NaN loss at step {step} in term `{term}`")]
    NanLoss { step: usize, term: &'static str },

    #[error("unknown blind mode `{0}`")]
    UnknownBlindMode(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
