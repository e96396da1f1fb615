use thiserror::Error;

use crate::grad::GradError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training loss at epoch {epoch}: {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("nuisance models were fitted on {count} of the evaluation indices (e.g. row {example}); fit and evaluation data must be disjoint")]
    FitEvalOverlap { count: usize, example: usize },
    #[error("degenerate treatment residuals: sum of squared V-hat is zero")]
    DegenerateTreatment,
    #[error("degenerate pilot residuals: {0}")]
    DegenerateScales(String),
    #[error("no ground truth available: {0}")]
    NoOracle(String),
    #[error("csv ingestion failed: {0}")]
    Ingest(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
