use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SadaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("index ({i}, {j}) outside the {height}x{width} frequency grid")]
    FrequencyOutOfRange { i: i64, j: i64, height: usize, width: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model oracle failed ({context}): {source}")]
    Oracle {
        context: String,
        #[source]
        source: Box<SadaError>,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("no sensitivity map available; run `sada sensitivity` first")]
    MissingSensitivityMap,

    #[error("{stage}: {message}")]
    Stage { stage: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl SadaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SadaError::Io { path: path.into(), source }
    }

    /// Wraps an error raised by a model oracle with the sample or bin it was
    /// evaluating.
    pub fn oracle(context: impl Into<String>, source: SadaError) -> Self {
        SadaError::Oracle { context: context.into(), source: Box::new(source) }
    }

    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        SadaError::ShapeMismatch { expected: expected.into(), actual: actual.into() }
    }

    /// True for errors caused by bad user configuration rather than a runtime
    /// failure. The CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(self, SadaError::Config(_) | SadaError::MissingSensitivityMap)
    }
}

pub type Result<T, E = SadaError> = std::result::Result<T, E>;
