use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus too small to split ({0} documents, need at least 10)")]
    CorpusTooSmall(usize),

    #[error("label {label} outside the {classes} supported classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("needs ≥ 2 samples")]
    TooFewSamples,

    #[error("zero feature vector")]
    ZeroFeatureVector,

    #[error("degenerate domain split: {0}")]
    DegenerateDomainSplit(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
