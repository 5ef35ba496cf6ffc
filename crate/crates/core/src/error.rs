use thiserror::Error;

/// Errors surfaced by the reward toolkit.
///
/// Every variant maps to a stable machine-readable code (see [`Error::code`])
/// that the CLI and the HTTP service report verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("query {query:?} is closed-ended but no reference answer was supplied")]
    ReferenceRequired { query: String },

    #[error("a calibration map is required to score closed-ended queries with variant {variant}")]
    CalibrationRequired { variant: String },

    #[error(
        "degenerate r_y range [{lo}, {hi}]; fit the calibration on a larger or more varied corpus"
    )]
    DegenerateCalibration { lo: f64, hi: f64 },

    #[error("calibration corpus has {got} pairs, need at least {need}")]
    CorpusTooSmall { got: usize, need: usize },

    #[error("invalid percentiles: lo={lo}, hi={hi} (need 0 <= lo < hi <= 100)")]
    InvalidPercentiles { lo: f64, hi: f64 },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("embedding request to {endpoint} failed for batch {batch_index}: {message}")]
    EmbedTransport {
        endpoint: String,
        batch_index: usize,
        message: String,
    },

    #[error("classifier request to {endpoint} failed: {message}")]
    ClassifierTransport { endpoint: String, message: String },

    #[error("unrecognized query-type label {0:?}")]
    UnknownLabel(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("need at least {need} entities, got {got}")]
    TooFewEntities { got: usize, need: usize },

    #[error("requested {requested} triplets but only {available} entities are available")]
    TooManyRequested { requested: usize, available: usize },

    #[error("scorer failed on triplet {index}: {message}")]
    ScorerFailed { index: usize, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite PPO objective at step {step}: loss={loss}, kl={kl}")]
    NonFinite { step: usize, loss: f64, kl: f64 },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used on the CLI's stderr and in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ReferenceRequired { .. } => "REFERENCE_REQUIRED",
            Error::CalibrationRequired { .. } => "CALIBRATION_REQUIRED",
            Error::DegenerateCalibration { .. } => "DEGENERATE_CALIBRATION",
            Error::CorpusTooSmall { .. } => "CORPUS_TOO_SMALL",
            Error::InvalidPercentiles { .. } => "INVALID_PERCENTILES",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::EmbedTransport { .. } => "EMBED_TRANSPORT",
            Error::ClassifierTransport { .. } => "CLASSIFIER_TRANSPORT",
            Error::UnknownLabel(_) => "UNKNOWN_LABEL",
            Error::Config { .. } => "CONFIG",
            Error::TooFewEntities { .. } => "TOO_FEW_ENTITIES",
            Error::TooManyRequested { .. } => "TOO_MANY_REQUESTED",
            Error::ScorerFailed { .. } => "SCORER_FAILED",
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::NonFinite { .. } => "NON_FINITE",
            Error::MalformedLine { .. } => "MALFORMED_LINE",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }

    /// Transport failures may succeed on retry; everything else is deterministic.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::EmbedTransport { .. } | Error::ClassifierTransport { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
