//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by graph evaluation, model training, data loading,
/// attacks, and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("leaf `{0}` has no binding")]
    UnboundLeaf(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("graph output is not a scalar (shape {0:?})")]
    NonScalarOutput(Vec<usize>),

    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid attack config: {0}")]
    InvalidAttack(String),

    #[error("invalid aggregation: {0}")]
    InvalidAggregation(String),

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("negative input to {0}")]
    NegativeInput(&'static str),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(&'static str),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("metric value out of range: {0}")]
    MetricOutOfRange(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
