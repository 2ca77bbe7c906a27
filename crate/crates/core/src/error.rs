use thiserror::Error;

/// Errors surfaced by the toolkit. Variants mirror the failure modes of the
/// pipeline stages so callers can match on them and map to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported capture format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated capture file: {0}")]
    TruncatedFile(String),
    #[error("packet decode error: {0}")]
    Decode(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training labels are uniform; feature importance is undefined")]
    SingleClassTraining,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("non-finite loss during training: {0}")]
    NonFiniteLoss(String),
    #[error("no models provided")]
    EmptyModelSet,
    #[error("calibration needs at least 2 task models, got {0}")]
    TooFewModels(usize),
    #[error("no samples for class {0}")]
    EmptyClassData(String),
    #[error("support set is missing class {0}")]
    MissingClass(String),
    #[error("no calibrated threshold available; run calibrate first")]
    MissingThreshold,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("label {0:?} is not in the declared class set")]
    UnknownLabel(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
