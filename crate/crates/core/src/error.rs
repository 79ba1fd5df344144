use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("unknown label: {0}")]
    UnknownLabel(String),

    #[error("augmented record {record} references missing parent {parent}")]
    MissingParent { record: String, parent: String },

    #[error("split leakage: record {record} is in {child} but parent {parent} is in {parent_split}")]
    SplitLeakage {
        record: String,
        parent: String,
        child: String,
        parent_split: String,
    },

    #[error("label mismatch: augmented record {record} does not share its parent's label")]
    ParentLabelMismatch { record: String },

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("manifest is not splittable: {0}")]
    NotSplittable(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("image {width}x{height} is smaller than the {side}x{side} window")]
    ImageTooSmall { width: usize, height: usize, side: usize },

    #[error("cannot upsample {from} px to {to} px")]
    Upsample { from: usize, to: usize },

    #[error("class {0} has zero records and cannot be balanced")]
    ZeroCountClass(String),

    #[error("balance plan has no entry for class {0}")]
    PlanMissingClass(String),

    #[error("unknown architecture: {0}")]
    UnknownArchitecture(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
