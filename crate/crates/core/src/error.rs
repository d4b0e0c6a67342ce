use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with norm {norm:e} (must exceed 1e-12)")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid head state: {0}")]
    InvalidHeadState(String),

    #[error("invalid head configuration: {0}")]
    InvalidHeadConfig(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("need {needed} distractor inputs, pool has {available}")]
    InsufficientDistractors { needed: usize, available: usize },

    #[error("holdout needs at least 2 classes with at least 2 samples each")]
    InsufficientHoldout,

    #[error("verification requires a non-empty, balanced pair list")]
    EmptyPairs,

    #[error("metrics log was recorded without a noise ledger")]
    LedgerMissing,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
