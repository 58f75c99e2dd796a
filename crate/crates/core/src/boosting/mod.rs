//! Weighted CART regression trees and the AdaBoost.R2 ensemble with an
//! optional frozen-instance mask.

mod adaboost;
mod tree;

pub use adaboost::{
    adaboost_r2_fit, adaboost_r2_fit_observed, adjusted_errors, weighted_median, AdaBoostParams, R2Ensemble,
    RoundRecord,
};
pub use tree::{Node, RegressionTree, TreeParams};

/// Boosting with rows outside `active` treated as absent.
pub(crate) fn fit_core_masked(
    x: &FeatureMatrix,
    y: &[f64],
    init_weights: &[f64],
    frozen: &[bool],
    active: Option<&[bool]>,
    params: &AdaBoostParams,
) -> Result<(R2Ensemble, Vec<f64>), BoostError> {
    adaboost::fit_core(x, y, init_weights, frozen, active, params, &mut |_| {})
}

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoostError {
    #[error("all instance weights are zero")]
    AllWeightsZero,
    #[error("no unfrozen instances")]
    NoUnfrozenInstances,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite feature or target value")]
    NonFinite,
}

/// Dense row-major feature matrix with per-feature sort orders computed once.
///
/// Trees fitted repeatedly on the same rows (boosting rounds, CV folds with
/// rows masked by zero weight) reuse the sort orders instead of re-sorting.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    /// Column-major copy for split scans.
    columns: Vec<f64>,
    sorted: Vec<Vec<u32>>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, BoostError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(BoostError::DimensionMismatch("rows have different lengths".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_flat(data, rows.len(), n_cols)
    }

    pub fn from_flat(data: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self, BoostError> {
        if data.len() != n_rows * n_cols {
            return Err(BoostError::DimensionMismatch(format!(
                "{} values for {n_rows}x{n_cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BoostError::NonFinite);
        }
        let sorted = (0..n_cols)
            .map(|f| {
                let mut idx: Vec<u32> = (0..n_rows as u32).collect();
                idx.sort_by(|&a, &b| {
                    data[a as usize * n_cols + f]
                        .total_cmp(&data[b as usize * n_cols + f])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        let columns = (0..n_cols).flat_map(|f| (0..n_rows).map(move |i| (i, f))).map(|(i, f)| data[i * n_cols + f]).collect();
        Ok(Self { data, n_rows, n_cols, columns, sorted })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, f: usize) -> f64 {
        self.data[i * self.n_cols + f]
    }

    pub(crate) fn column(&self, f: usize) -> &[f64] {
        &self.columns[f * self.n_rows..(f + 1) * self.n_rows]
    }

    pub(crate) fn sorted(&self, f: usize) -> &[u32] {
        &self.sorted[f]
    }

    /// Copy holding only the listed rows, in the listed order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::from_flat(data, rows.len(), self.n_cols).expect("subset of a valid matrix")
    }
}

pub(crate) fn check_weights(w: &[f64], n: usize) -> Result<(), BoostError> {
    if w.len() != n {
        return Err(BoostError::DimensionMismatch(format!("{} weights for {n} rows", w.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(BoostError::InvalidWeights("weights must be finite and nonnegative".into()));
    }
    if !w.iter().any(|v| *v > 0.0) {
        return Err(BoostError::AllWeightsZero);
    }
    Ok(())
}
