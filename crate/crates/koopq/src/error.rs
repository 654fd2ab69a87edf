//! Error types for the fallible boundaries of the crate.
//!
//! Numeric tape primitives treat shape mismatches as programmer errors and
//! panic with a diagnostic naming the primitive and both shapes; everything
//! that can fail on user input (files, schemas, configs, model assembly,
//! training) returns one of the types below.

use thiserror::Error;

/// Failures inside the numeric core that are data- rather than shape-driven.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("non-finite gradient for parameter '{name}'; optimizer step aborted")]
    NonFiniteGrad { name: String },
}

/// Failures while assembling a model from a configuration.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config invalid: {0}")]
    InvalidConfig(String),
    #[error("latent width {found} does not chain with expected width {expected} at {site}")]
    WidthMismatch {
        site: String,
        expected: usize,
        found: usize,
    },
    #[error("operation requires an eigenvalue-parameterized transition, but stage {stage} uses a static dense operator")]
    NotEigenVariant { stage: usize },
}

/// Failures in dataset loading, cleaning, and splitting.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse CSV {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("column '{column}' not found in CSV header")]
    MissingColumn { column: String },
    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("dataset has {n} rows; at least {min} are required")]
    TooFewRows { n: usize, min: usize },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadSplit([f64; 3]),
    #[error("synthetic config invalid: {0}")]
    BadSynthetic(String),
}

/// Failures in the training pipeline.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("dataset and model disagree: {0}")]
    DataMismatch(String),
    #[error("training diverged in {phase}, epoch {epoch}: loss {loss}")]
    Diverged { phase: String, epoch: usize, loss: f64 },
    #[error("all {repeats} seed runs failed; first error: {first}")]
    AllSeedsFailed { repeats: usize, first: String },
}

/// Failures reading or writing model checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint does not match the model it claims to describe: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
