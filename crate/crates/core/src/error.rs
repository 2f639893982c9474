use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate label set: all {count} raw scores equal {value}")]
    DegenerateLabels { count: usize, value: f64 },

    #[error("requested {requested} items but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("sample `{0}` has no group id but a group-aware split was requested")]
    MissingGroup(String),

    #[error("no reference image for group `{0}`")]
    MissingReference(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownEntry {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("transform `{0}` is not strictly monotone on [0, 1]")]
    NonMonotone(String),

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("non-finite loss at step {step} on dataset `{dataset}`")]
    NonFiniteLoss {
        step: u64,
        dataset: String,
        dump: Option<PathBuf>,
    },

    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
