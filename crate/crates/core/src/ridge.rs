//! Closed-form ridge regression with cross-validated penalty selection,
//! repeated-subsample coefficient averaging and threshold-based variable
//! filtering.
//!
//! Inputs are centered and scaled to unit sample standard deviation; the
//! target is centered only, so coefficients are in target units per input
//! standard deviation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{CorrectionError, Dataset};

#[derive(Debug, Error)]
pub enum RidgeError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("singular system (lambda = {lambda}); rank-deficient inputs need lambda > 0")]
    SingularSystem { lambda: f64 },
    #[error("need at least {folds} rows for {folds}-fold selection, have {rows}")]
    InsufficientRows { rows: usize, folds: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite input values")]
    NonFinite,
    #[error(transparent)]
    Dataset(#[from] CorrectionError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeRecord {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    /// 1 for zero-variance columns.
    pub scales: Vec<f64>,
    pub zero_variance: Vec<bool>,
    pub target: String,
    pub target_mean: f64,
}

#[derive(Debug, Clone)]
pub struct Standardized {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub record: StandardizeRecord,
}

/// Centers and scales inputs (sample sd), centers the target.
pub fn standardize(d: &Dataset, target: &str) -> Result<Standardized, RidgeError> {
    if d.is_empty() {
        return Err(RidgeError::EmptyDataset);
    }
    let y_raw = d
        .target_column(target)
        .map_err(|_| RidgeError::UnknownTarget(target.to_string()))?;
    let n = d.len();
    let p = d.input_names().len();
    let stats = d.input_stats();
    let zero_variance: Vec<bool> = stats.iter().map(|s| !(s.sd > 0.0)).collect();
    let scales: Vec<f64> = stats
        .iter()
        .zip(&zero_variance)
        .map(|(s, &z)| if z { 1.0 } else { s.sd })
        .collect();
    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let x = DMatrix::from_fn(n, p, |i, j| (d.rows()[i].inputs[j] - means[j]) / scales[j]);
    let target_mean = y_raw.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, y_raw.iter().map(|v| v - target_mean));
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(RidgeError::NonFinite);
    }
    Ok(Standardized {
        x,
        y,
        record: StandardizeRecord {
            names: d.input_names().to_vec(),
            means,
            scales,
            zero_variance,
            target: target.to_string(),
            target_mean,
        },
    })
}

/// Solves `(XᵀX + λI) β = Xᵀy` by Cholesky factorization.
///
/// At λ = 0 a rank-deficient design yields `SingularSystem`; no implicit
/// regularization is added.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, RidgeError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RidgeError::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(RidgeError::EmptyDataset);
    }
    if x.nrows() != y.len() {
        return Err(RidgeError::InvalidParameter("x and y row counts differ".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(RidgeError::NonFinite);
    }
    let xt = x.transpose();
    let mut gram = &xt * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = &xt * y;
    let max_diag = gram.diagonal().iter().cloned().fold(0.0, f64::max);
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(RidgeError::SingularSystem { lambda })?;
    let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if max_diag == 0.0 || min_pivot <= 1e-12 * max_diag {
        return Err(RidgeError::SingularSystem { lambda });
    }
    let beta = chol.solve(&rhs);
    let residual = (&gram * &beta - &rhs).norm();
    if residual > 1e-8 * rhs.norm().max(f64::MIN_POSITIVE) && residual > 1e-12 {
        return Err(RidgeError::SingularSystem { lambda });
    }
    Ok(beta)
}

/// Ridge fit that pins flagged columns to an exact zero coefficient.
fn fit_masked(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, skip: &[bool]) -> Result<DVector<f64>, RidgeError> {
    let keep: Vec<usize> = (0..x.ncols()).filter(|&j| !skip[j]).collect();
    let mut beta = DVector::zeros(x.ncols());
    if keep.is_empty() {
        return Ok(beta);
    }
    let sub = x.select_columns(keep.iter());
    let b = ridge_fit(&sub, y, lambda)?;
    for (k, &j) in keep.iter().enumerate() {
        beta[j] = b[k];
    }
    Ok(beta)
}

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

/// Deterministic fold assignment: a seeded shuffle, then round-robin.
pub(crate) fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Mean held-out squared error of each grid value under seeded k-fold CV.
pub fn cv_errors(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>, RidgeError> {
    let n = x.nrows();
    if grid.is_empty() {
        return Err(RidgeError::InvalidParameter("lambda grid is empty".into()));
    }
    if folds < 2 {
        return Err(RidgeError::InvalidParameter("folds must be >= 2".into()));
    }
    if n < folds {
        return Err(RidgeError::InsufficientRows { rows: n, folds });
    }
    let assignment = fold_assignment(n, folds, seed);
    let mut sse = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
        let xt = x.select_rows(train.iter());
        let yt = y.select_rows(train.iter());
        let x_mean = xt.row_mean();
        let y_mean = yt.mean();
        let mut xc = xt.clone();
        for mut row in xc.row_iter_mut() {
            row -= &x_mean;
        }
        let yc = yt.add_scalar(-y_mean);
        let constant: Vec<bool> = xc.column_iter().map(|c| c.iter().all(|v| *v == 0.0)).collect();
        for (g, &lambda) in grid.iter().enumerate() {
            match fit_masked(&xc, &yc, lambda, &constant) {
                Ok(beta) => {
                    for &i in &test {
                        let pred = y_mean + (x.row(i) - &x_mean).dot(&beta.transpose());
                        sse[g] += (y[i] - pred).powi(2);
                    }
                }
                Err(RidgeError::SingularSystem { .. }) => sse[g] = f64::INFINITY,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(sse.into_iter().map(|s| s / n as f64).collect())
}

/// Grid value with minimum CV mean squared error; ties go to the larger λ.
pub fn select_lambda(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64, RidgeError> {
    let errors = cv_errors(x, y, grid, folds, seed)?;
    let mut best: Option<(f64, f64)> = None;
    for (&lambda, &err) in grid.iter().zip(&errors) {
        best = match best {
            None => Some((lambda, err)),
            Some((bl, be)) if err < be || (err == be && lambda > bl) => Some((lambda, err)),
            keep => keep,
        };
    }
    let (lambda, err) = best.expect("grid non-empty");
    if !err.is_finite() {
        return Err(RidgeError::SingularSystem { lambda });
    }
    Ok(lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeConfig {
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub runs: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            folds: 5,
            runs: 10,
            subsample: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub target: String,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub column_means: Vec<f64>,
    pub column_scales: Vec<f64>,
    pub target_mean: f64,
}

impl RidgeModel {
    pub fn predict(&self, inputs: &[f64]) -> f64 {
        self.target_mean
            + inputs
                .iter()
                .zip(&self.column_means)
                .zip(&self.column_scales)
                .zip(&self.coefficients)
                .map(|(((v, m), s), b)| (v - m) / s * b)
                .sum::<f64>()
    }
}

/// Standardizes, selects λ by CV (seeded with `seed`) and fits once.
pub fn fit_ridge(d: &Dataset, target: &str, grid: &[f64], folds: usize, seed: u64) -> Result<RidgeModel, RidgeError> {
    let st = standardize(d, target)?;
    let keep: Vec<usize> = (0..st.x.ncols()).filter(|&j| !st.record.zero_variance[j]).collect();
    let lambda = if keep.is_empty() {
        grid.first().copied().unwrap_or(1.0)
    } else {
        select_lambda(&st.x.select_columns(keep.iter()), &st.y, grid, folds, seed)?
    };
    let beta = fit_masked(&st.x, &st.y, lambda, &st.record.zero_variance)?;
    Ok(RidgeModel {
        target: target.to_string(),
        names: st.record.names,
        coefficients: beta.iter().copied().collect(),
        lambda,
        column_means: st.record.means,
        column_scales: st.record.scales,
        target_mean: st.record.target_mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedCoefficients {
    pub target: String,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// λ selected in each run.
    pub lambdas: Vec<f64>,
}

/// Repeats [`fit_ridge`] on seeded row subsamples and averages the coefficients.
///
/// Run `r` keeps `ceil(subsample · n)` rows (in original order) and uses
/// `seed + r` for its CV split, so one run at subsample 1 equals a full fit.
pub fn averaged_fit(d: &Dataset, target: &str, cfg: &RidgeConfig) -> Result<AveragedCoefficients, RidgeError> {
    if cfg.runs < 1 {
        return Err(RidgeError::InvalidParameter("runs must be >= 1".into()));
    }
    if !(cfg.subsample > 0.0 && cfg.subsample <= 1.0) {
        return Err(RidgeError::InvalidParameter(format!("subsample must be in (0, 1], got {}", cfg.subsample)));
    }
    if d.is_empty() {
        return Err(RidgeError::EmptyDataset);
    }
    let n = d.len();
    let take = ((cfg.subsample * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sum = vec![0.0; d.input_names().len()];
    let mut lambdas = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let model = if take == n {
            fit_ridge(d, target, &cfg.lambda_grid, cfg.folds, cfg.seed.wrapping_add(r as u64))?
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut chosen = idx[..take].to_vec();
            chosen.sort_unstable();
            let keep: BTreeSet<usize> = chosen.into_iter().collect();
            let rows: Vec<_> = d
                .rows()
                .iter()
                .enumerate()
                .filter(|(i, _)| keep.contains(i))
                .map(|(_, r)| r.clone())
                .collect();
            let sub = Dataset::new(d.input_names().to_vec(), d.target_names().to_vec(), rows)?;
            fit_ridge(&sub, target, &cfg.lambda_grid, cfg.folds, cfg.seed.wrapping_add(r as u64))?
        };
        for (s, b) in sum.iter_mut().zip(&model.coefficients) {
            *s += b;
        }
        lambdas.push(model.lambda);
    }
    Ok(AveragedCoefficients {
        target: target.to_string(),
        names: d.input_names().to_vec(),
        coefficients: sum.into_iter().map(|s| s / cfg.runs as f64).collect(),
        lambdas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Speed,
    Occupancy,
    Flow,
}

impl TargetKind {
    pub fn of(target: &str) -> Option<Self> {
        if target.ends_with("mean_speed") {
            Some(Self::Speed)
        } else if target.ends_with("occupancy") {
            Some(Self::Occupancy)
        } else if target.ends_with("flow") {
            Some(Self::Flow)
        } else {
            None
        }
    }
}

/// Per-kind coefficient thresholds for variable filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub speed: f64,
    pub occupancy: f64,
    pub flow: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { speed: 0.5, occupancy: 0.5, flow: 50.0 }
    }
}

impl Thresholds {
    pub fn for_kind(&self, kind: TargetKind) -> f64 {
        match kind {
            TargetKind::Speed => self.speed,
            TargetKind::Occupancy => self.occupancy,
            TargetKind::Flow => self.flow,
        }
    }

    /// Parses `speed:0.5,occupancy:0.5,flow:50`.
    pub fn parse(s: &str) -> Result<Self, RidgeError> {
        let mut t = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once(':')
                .ok_or_else(|| RidgeError::InvalidParameter(format!("threshold `{part}` is not kind:value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| RidgeError::InvalidParameter(format!("threshold value `{v}`")))?;
            match k.trim() {
                "speed" => t.speed = v,
                "occupancy" => t.occupancy = v,
                "flow" => t.flow = v,
                other => return Err(RidgeError::InvalidParameter(format!("unknown threshold kind `{other}`"))),
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub threshold: f64,
    pub coefficients: BTreeMap<String, f64>,
    pub selected: BTreeSet<String>,
    /// True when nothing passed the threshold and every variable was kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    pub targets: BTreeMap<String, TargetSelection>,
}

impl SelectionResult {
    /// Selected inputs for `target` in the given roster order.
    pub fn selected_in_order(&self, target: &str, roster: &[String]) -> Option<Vec<String>> {
        let sel = self.targets.get(target)?;
        Some(roster.iter().filter(|n| sel.selected.contains(*n)).cloned().collect())
    }
}

/// Keeps variables with |coefficient| strictly above the target kind's threshold.
///
/// When no variable passes, every variable is kept and the target is flagged.
pub fn filter_variables(coeffs: &[AveragedCoefficients], thresholds: &Thresholds) -> Result<SelectionResult, RidgeError> {
    let mut out = SelectionResult::default();
    for c in coeffs {
        let kind = TargetKind::of(&c.target)
            .ok_or_else(|| RidgeError::InvalidParameter(format!("cannot infer kind of target `{}`", c.target)))?;
        let threshold = thresholds.for_kind(kind);
        if !(threshold >= 0.0 && threshold.is_finite()) {
            return Err(RidgeError::InvalidParameter(format!("threshold for {kind:?} must be >= 0")));
        }
        let coefficients: BTreeMap<String, f64> = c.names.iter().cloned().zip(c.coefficients.iter().copied()).collect();
        let mut selected: BTreeSet<String> = coefficients
            .iter()
            .filter(|(_, b)| b.abs() > threshold)
            .map(|(n, _)| n.clone())
            .collect();
        let fallback = selected.is_empty();
        if fallback {
            log::warn!("no variable passes threshold {threshold} for {}; keeping all", c.target);
            selected = coefficients.keys().cloned().collect();
        }
        out.targets.insert(
            c.target.clone(),
            TargetSelection { threshold, coefficients, selected, fallback },
        );
    }
    Ok(out)
}

/// Writes rows = variables (roster order), one value column per target plus a
/// `selected_<target>` 0/1 flag column.
pub fn write_coefficient_table<W: Write>(
    out: W,
    roster: &[String],
    selection: &SelectionResult,
) -> Result<(), RidgeError> {
    let mut w = csv::Writer::from_writer(out);
    let targets: Vec<&String> = selection.targets.keys().collect();
    let mut header = vec!["variable".to_string()];
    for t in &targets {
        header.push((*t).clone());
        header.push(format!("selected_{t}"));
    }
    w.write_record(&header)?;
    for name in roster {
        let mut rec = vec![name.clone()];
        for t in &targets {
            let sel = &selection.targets[*t];
            rec.push(sel.coefficients.get(name).map(|v| format!("{v:.6}")).unwrap_or_default());
            rec.push(if sel.selected.contains(name) { "1" } else { "0" }.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
