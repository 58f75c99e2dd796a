//! Two-stage TrAdaBoost.R2.
//!
//! Source rows come from already-observed sections. A subset of them, picked
//! by cosine similarity against the new section's inputs, is copied into a
//! pseudo-target block ("substitute"). Training data is the source block
//! followed by the substitute block. Each step boosts with the source block
//! frozen, scores the result by cross-validation over substitute rows only,
//! then moves weight mass from source to substitute on a fixed schedule.
//! The step with the lowest CV error wins.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boosting::{adjusted_errors, AdaBoostParams, BoostError, FeatureMatrix, R2Ensemble, RegressionTree, TreeParams};
use crate::correction::ColumnStats;
use crate::ridge::fold_assignment;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid transfer config: {0}")]
    Config(String),
    #[error("source set is empty")]
    EmptySource,
    #[error("target input set is empty")]
    EmptyTarget,
    #[error("no source row passes the substitute rule (theta = {theta}, comparator = {comparator}); adjust theta")]
    EmptySubstitute { theta: f64, comparator: Comparator },
    #[error("{folds} folds need at least {folds} substitute rows, have {m}")]
    FoldsExceedSubstitute { folds: usize, m: usize },
    #[error("target-mass goal {goal} is below the current mass {current}")]
    GoalUnreachable { goal: f64, current: f64 },
    #[error("target-mass goal {goal} unreachable: zero-error source rows cap the mass at {reachable}")]
    ZeroErrorFloor { goal: f64, reachable: f64 },
    #[error("beta search did not converge (goal {goal}, reached {reached})")]
    NoConvergence { goal: f64, reached: f64 },
    #[error("column roster mismatch: model expects {expected:?}, got {got:?}")]
    RosterMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Substitute membership rule: similarity at most θ (`le`) or at least θ (`ge`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    #[default]
    Le,
    Ge,
}

impl Comparator {
    pub fn admits(self, sim: f64, theta: f64) -> bool {
        match self {
            Comparator::Le => sim <= theta,
            Comparator::Ge => sim >= theta,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Le => "le",
            Comparator::Ge => "ge",
        })
    }
}

impl FromStr for Comparator {
    type Err = TransferError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "le" => Ok(Comparator::Le),
            "ge" => Ok(Comparator::Ge),
            other => Err(TransferError::Config(format!("comparator must be le or ge, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub steps: usize,
    pub folds: usize,
    pub theta: f64,
    pub comparator: Comparator,
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_leaf_weight: Option<f64>,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            folds: 5,
            theta: DEFAULT_THETA,
            comparator: Comparator::Le,
            n_estimators: 50,
            max_depth: 5,
            min_leaf_weight: None,
            seed: 0,
        }
    }
}

/// Default similarity threshold.
pub const DEFAULT_THETA: f64 = 0.9;

impl TransferConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        if self.steps < 2 {
            return Err(TransferError::Config(format!("steps must be >= 2, got {}", self.steps)));
        }
        if self.folds < 2 {
            return Err(TransferError::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(TransferError::Config(format!("theta must be in [-1, 1], got {}", self.theta)));
        }
        if self.n_estimators == 0 {
            return Err(TransferError::Config("n_estimators must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adaboost(&self) -> AdaBoostParams {
        AdaBoostParams {
            n_estimators: self.n_estimators,
            tree: TreeParams { max_depth: self.max_depth, min_leaf_weight: self.min_leaf_weight },
        }
    }
}

/// Per-column centering and scaling fitted on source rows (sample sd; 1 for
/// constant columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        let stats: Vec<ColumnStats> = (0..p).map(|j| ColumnStats::of(rows.iter().map(|r| r[j]))).collect();
        Self {
            means: stats.iter().map(|s| s.mean).collect(),
            scales: stats.iter().map(|s| if s.sd > 0.0 { s.sd } else { 1.0 }).collect(),
        }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Maximum cosine similarity of each source row to any target row.
pub fn max_similarity(source: &[Vec<f64>], target: &[Vec<f64>]) -> Vec<f64> {
    source
        .iter()
        .map(|s| target.iter().map(|t| cosine(s, t)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Indices of source rows admitted as substitute. Rows must already be standardized.
pub fn build_substitute(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    theta: f64,
    comparator: Comparator,
) -> Result<Vec<usize>, TransferError> {
    if source.is_empty() {
        return Err(TransferError::EmptySource);
    }
    if target.is_empty() {
        return Err(TransferError::EmptyTarget);
    }
    let picked: Vec<usize> = max_similarity(source, target)
        .into_iter()
        .enumerate()
        .filter(|(_, s)| comparator.admits(*s, theta))
        .map(|(j, _)| j)
        .collect();
    if picked.is_empty() {
        return Err(TransferError::EmptySubstitute { theta, comparator });
    }
    Ok(picked)
}

/// Target mass the schedule prescribes after step `t` (1-based), clamped to 1.
pub fn schedule_goal(t: usize, steps: usize, n: usize, m: usize) -> f64 {
    let r = m as f64 / (n + m) as f64;
    (r + t as f64 / (steps - 1) as f64 * (1.0 - r)).min(1.0)
}

const MASS_TOL: f64 = 1e-10;

/// β in [0, 1] such that scaling source weights by β^e and renormalizing
/// leaves the substitute block (rows `n..n+m`) with mass `goal`.
pub fn beta_search(weights: &[f64], n: usize, m: usize, goal: f64, errors: &[f64]) -> Result<f64, TransferError> {
    log_beta_search(weights, n, m, goal, errors).map(|s| (-s).exp())
}

/// Bisection for `s = ln(1/β)`.
///
/// Searching in `s` rather than β keeps rows with tiny positive errors
/// movable: their factor `exp(-s·e)` still reaches zero for large `s`, while
/// a bisection on β stalls once β underflows.
fn log_beta_search(weights: &[f64], n: usize, m: usize, goal: f64, errors: &[f64]) -> Result<f64, TransferError> {
    if weights.len() != n + m || errors.len() != n {
        return Err(TransferError::Config("weights must have n + m entries and errors n".into()));
    }
    if !(goal > 0.0 && goal <= 1.0) {
        return Err(TransferError::Config(format!("goal must be in (0, 1], got {goal}")));
    }
    let target: f64 = weights[n..].iter().sum();
    let source: f64 = weights[..n].iter().sum();
    let current = target / (target + source);
    if goal < current - MASS_TOL {
        return Err(TransferError::GoalUnreachable { goal, current });
    }
    if (goal - current).abs() <= MASS_TOL {
        return Ok(0.0);
    }
    if goal >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let floor: f64 = weights[..n].iter().zip(errors).filter(|(_, e)| **e == 0.0).map(|(w, _)| w).sum();
    let reachable = target / (target + floor);
    if reachable < goal - MASS_TOL {
        return Err(TransferError::ZeroErrorFloor { goal, reachable });
    }
    let mass_at = |s: f64| {
        let src: f64 = weights[..n].iter().zip(errors).map(|(w, e)| w * (-s * e).exp()).sum();
        target / (target + src)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut reached = mass_at(hi);
    while reached < goal - MASS_TOL && hi < 1e300 {
        lo = hi;
        hi *= 2.0;
        reached = mass_at(hi);
    }
    if (reached - goal).abs() <= MASS_TOL {
        return Ok(hi);
    }
    let mut mid = hi;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        reached = mass_at(mid);
        if (reached - goal).abs() <= MASS_TOL {
            return Ok(mid);
        }
        if reached < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (reached - goal).abs() <= 1e-8 {
        return Ok(mid);
    }
    Err(TransferError::NoConvergence { goal, reached })
}

/// Applies a weight update toward `goal` and renormalizes to sum 1.
///
/// When zero-error source rows make the goal unreachable, every source row
/// with positive error is zeroed and the zero-error rows are scaled to hit
/// the goal exactly. Returns the β used (0 in that case).
fn move_mass(w: &mut [f64], n: usize, goal: f64, errors: &[f64]) -> Result<f64, TransferError> {
    let m = w.len() - n;
    let s = match log_beta_search(w, n, m, goal, errors) {
        Ok(s) => s,
        Err(TransferError::ZeroErrorFloor { reachable, .. }) => {
            log::warn!("zero-error source rows cap target mass at {reachable:.6}; scaling them to reach {goal:.6}");
            let target: f64 = w[n..].iter().sum();
            let floor: f64 = (0..n).filter(|&i| errors[i] == 0.0).map(|i| w[i]).sum();
            let c = target * (1.0 - goal) / (goal * floor);
            for i in 0..n {
                w[i] = if errors[i] == 0.0 { w[i] * c } else { 0.0 };
            }
            normalize(w);
            return Ok(0.0);
        }
        Err(e) => return Err(e),
    };
    if s == f64::INFINITY {
        w[..n].iter_mut().for_each(|v| *v = 0.0);
    } else if s > 0.0 {
        for i in 0..n {
            w[i] *= (-s * errors[i]).exp();
        }
    }
    normalize(w);
    Ok((-s).exp())
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
}

/// One step of the outer loop, for instrumentation.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Weights the step's ensemble was trained with.
    pub weights: Vec<f64>,
    pub cv_error: f64,
    /// β of the mass update after this step; `None` at the final step.
    pub beta: Option<f64>,
    /// Weights after the update; `None` at the final step.
    pub updated_weights: Option<Vec<f64>>,
    pub goal: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub ensemble: R2Ensemble,
    /// 1-based step whose ensemble was selected.
    pub best_step: usize,
    pub step_errors: Vec<f64>,
}

/// Runs the outer loop on standardized source rows with a given substitute.
pub fn two_stage_core(
    source: &[Vec<f64>],
    y: &[f64],
    substitute: &[usize],
    cfg: &TransferConfig,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TwoStageResult, TransferError> {
    cfg.validate()?;
    let n = source.len();
    let m = substitute.len();
    if n == 0 {
        return Err(TransferError::EmptySource);
    }
    if y.len() != n {
        return Err(TransferError::Config(format!("{} targets for {n} source rows", y.len())));
    }
    if m == 0 {
        return Err(TransferError::EmptySubstitute { theta: cfg.theta, comparator: cfg.comparator });
    }
    if substitute.iter().any(|&j| j >= n) {
        return Err(TransferError::Config("substitute index out of range".into()));
    }
    if cfg.folds > m {
        return Err(TransferError::FoldsExceedSubstitute { folds: cfg.folds, m });
    }
    let mut rows: Vec<Vec<f64>> = source.to_vec();
    rows.extend(substitute.iter().map(|&j| source[j].clone()));
    let mut yy: Vec<f64> = y.to_vec();
    yy.extend(substitute.iter().map(|&j| y[j]));
    let x = FeatureMatrix::from_rows(&rows)?;
    let total = n + m;
    let frozen: Vec<bool> = (0..total).map(|i| i < n).collect();
    let params = cfg.adaboost();
    let fold_of = fold_assignment(m, cfg.folds, cfg.seed);

    let mut w = vec![1.0 / total as f64; total];
    let mut best: Option<(usize, f64, R2Ensemble)> = None;
    let mut step_errors = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let (ensemble, _) = crate::boosting::fit_core_masked(&x, &yy, &w, &frozen, None, &params)?;

        let mut sse = 0.0;
        let mut active = vec![true; total];
        for f in 0..cfg.folds {
            for k in 0..m {
                active[n + k] = fold_of[k] != f;
            }
            if !(0..m).any(|k| active[n + k]) {
                continue;
            }
            let (fold_model, _) = crate::boosting::fit_core_masked(&x, &yy, &w, &frozen, Some(&active), &params)?;
            for k in (0..m).filter(|&k| fold_of[k] == f) {
                sse += (fold_model.predict(x.row(n + k)) - yy[n + k]).powi(2);
            }
        }
        let cv_error = (sse / m as f64).sqrt();
        if !cv_error.is_finite() {
            return Err(TransferError::Config(format!("non-finite CV error at step {t}")));
        }
        step_errors.push(cv_error);

        let mut record = StepRecord { step: t, weights: w.clone(), cv_error, beta: None, updated_weights: None, goal: None };
        if t < cfg.steps {
            let tree = RegressionTree::fit(&x, &yy, &w, &params.tree)?;
            let e = adjusted_errors(&tree.predict_matrix(&x), &yy);
            let goal = schedule_goal(t, cfg.steps, n, m);
            let beta = move_mass(&mut w, n, goal, &e[..n])?;
            record.beta = Some(beta);
            record.goal = Some(goal);
            record.updated_weights = Some(w.clone());
        }
        observer(&record);
        log::debug!("step {t}: cv rmse {cv_error:.6}");
        if best.as_ref().is_none_or(|(_, be, _)| cv_error < *be) {
            best = Some((t, cv_error, ensemble));
        }
    }
    let (best_step, _, ensemble) = best.expect("steps >= 2");
    Ok(TwoStageResult { ensemble, best_step, step_errors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferModel {
    pub format_version: u32,
    pub target: String,
    pub roster: Vec<String>,
    pub standardizer: Standardizer,
    pub ensemble: R2Ensemble,
    pub best_step: usize,
    pub step_errors: Vec<f64>,
    pub theta: f64,
    pub comparator: Comparator,
    pub source_rows: usize,
    pub substitute_rows: usize,
    pub config: TransferConfig,
}

impl TransferModel {
    pub fn check_roster(&self, roster: &[String]) -> Result<(), TransferError> {
        if roster != self.roster.as_slice() {
            return Err(TransferError::RosterMismatch { expected: self.roster.clone(), got: roster.to_vec() });
        }
        Ok(())
    }

    /// Predicts raw (unstandardized) input rows whose columns follow `roster`.
    pub fn predict(&self, roster: &[String], rows: &[Vec<f64>]) -> Result<Vec<f64>, TransferError> {
        self.check_roster(roster)?;
        if rows.iter().any(|r| r.len() != self.roster.len()) {
            return Err(TransferError::Config("row length differs from roster".into()));
        }
        Ok(rows.iter().map(|r| self.ensemble.predict(&self.standardizer.apply(r))).collect())
    }

    pub fn to_json(&self) -> Result<String, TransferError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TransferError> {
        let model: Self = serde_json::from_str(s)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(TransferError::FormatVersion(model.format_version));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TransferError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TransferError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Standardizes by source statistics, builds the substitute against the
/// target section's input rows and runs the two-stage loop.
pub fn two_stage_fit(
    target: &str,
    roster: &[String],
    source_x: &[Vec<f64>],
    source_y: &[f64],
    target_x: &[Vec<f64>],
    cfg: &TransferConfig,
) -> Result<TransferModel, TransferError> {
    two_stage_fit_observed(target, roster, source_x, source_y, target_x, cfg, &mut |_| {})
}

pub fn two_stage_fit_observed(
    target: &str,
    roster: &[String],
    source_x: &[Vec<f64>],
    source_y: &[f64],
    target_x: &[Vec<f64>],
    cfg: &TransferConfig,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<TransferModel, TransferError> {
    cfg.validate()?;
    if source_x.is_empty() {
        return Err(TransferError::EmptySource);
    }
    if source_x.iter().chain(target_x).any(|r| r.len() != roster.len()) {
        return Err(TransferError::Config("row length differs from roster".into()));
    }
    let standardizer = Standardizer::fit(source_x);
    let src = standardizer.apply_all(source_x);
    let tgt = standardizer.apply_all(target_x);
    let substitute = build_substitute(&src, &tgt, cfg.theta, cfg.comparator)?;
    let result = two_stage_core(&src, source_y, &substitute, cfg, observer)?;
    Ok(TransferModel {
        format_version: MODEL_FORMAT_VERSION,
        target: target.to_string(),
        roster: roster.to_vec(),
        standardizer,
        ensemble: result.ensemble,
        best_step: result.best_step,
        step_errors: result.step_errors,
        theta: cfg.theta,
        comparator: cfg.comparator,
        source_rows: source_x.len(),
        substitute_rows: substitute.len(),
        config: *cfg,
    })
}
