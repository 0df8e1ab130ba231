use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called without a matching forward pass")]
    StaleTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid subgroup spec: {0}")]
    InvalidSpec(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("csv row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("subgroup {group} is absent")]
    AbsentSubgroup { group: usize },

    #[error("subgroup {group} has {available} samples, needs at least {needed}")]
    SubgroupTooSmall {
        group: usize,
        available: usize,
        needed: usize,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
