use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch for tensor `{name}`: manifest {expected:?}, spec {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset `{0}` is empty after filtering")]
    EmptyDataset(String),

    #[error("no adversarial anchor found after {tries} tries")]
    AnchorSearchFailed { tries: usize },

    #[error("stale cache: built for model {cache}, current model is {model}")]
    StaleCache { cache: String, model: String },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("layer {layer} is not a convolution")]
    NotConv { layer: usize },

    #[error("no records cover channel {channel} at gamma {gamma}")]
    NoCoveringRecords { channel: usize, gamma: usize },

    #[error("coverage mismatch between effect tables: {missing} sets missing, first {example}")]
    Coverage { missing: usize, example: String },

    #[error("incomplete bundle: {0}")]
    IncompleteBundle(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for the machine-readable error line of the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid_shape",
            Error::InvalidGeometry(_) => "invalid_geometry",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::BadMagic { .. } => "bad_magic",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::AnchorSearchFailed { .. } => "anchor_search_failed",
            Error::StaleCache { .. } => "stale_cache",
            Error::OutOfRange(_) => "out_of_range",
            Error::EmptyInput(_) => "empty_input",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::NotConv { .. } => "not_conv",
            Error::NoCoveringRecords { .. } => "no_covering_records",
            Error::Coverage { .. } => "coverage",
            Error::IncompleteBundle(_) => "incomplete_bundle",
            Error::Config(_) => "config",
            Error::Malformed { .. } => "malformed",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
