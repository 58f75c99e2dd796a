//! Error metrics, the KNN baseline, leave-one-section-out evaluation,
//! hyperparameter grid search and report files.
//!
//! MAE is the standard mean of absolute residuals. MAPE leaves out targets
//! with magnitude below 1e-9 and reports how many were skipped.

pub mod grid;
pub mod knn;
pub mod loso;
pub mod metrics;
pub mod report;

pub use grid::{expand, grid_search, GridModel, GridResult, GridRow, GridSpec};
pub use knn::{knn_fit, KnnModel, DEFAULT_K_GRID};
pub use loso::{fit_predict, fold_seed, loso_cv, run_fold, FoldDetail, FoldOutcome, ModelSpec};
pub use metrics::{mae, mape, rmse, Metric, Scores};
pub use report::{emit_report, timings_csv, MetricRecord, MetricReport};

use thiserror::Error;

use crate::boosting::BoostError;
use crate::transfer::TransferError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("every target is zero; MAPE undefined")]
    AllTargetsZero,
    #[error("leave-one-section-out needs at least 2 sections, found {0}")]
    TooFewSections(usize),
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("k = {k} is not in 1..={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("report mismatch: {0}")]
    ReportMismatch(String),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
