use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::knn::knn_fit;
use super::metrics::Scores;
use super::EvalError;
use crate::boosting::{adaboost_r2_fit, AdaBoostParams, FeatureMatrix, TreeParams};
use crate::correction::{Dataset, FeatureRow};
use crate::domain::SectionId;
use crate::transfer::{two_stage_fit, TransferConfig};

/// A model evaluated under leave-one-section-out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Two-stage transfer boosting; the fold seed replaces `seed`.
    Transfer(TransferConfig),
    /// AdaBoost.R2 on the source sections only.
    SourceOnly { n_estimators: usize, max_depth: usize, min_leaf_weight: Option<f64> },
    Knn { k: usize },
}

impl ModelSpec {
    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            ModelSpec::Transfer(_) => "TRA",
            ModelSpec::SourceOnly { .. } => "ADA",
            ModelSpec::Knn { .. } => "KNN",
        }
    }

    /// Source-only boosting with the same tree settings as a transfer config.
    pub fn source_only_like(cfg: &TransferConfig) -> Self {
        ModelSpec::SourceOnly {
            n_estimators: cfg.n_estimators,
            max_depth: cfg.max_depth,
            min_leaf_weight: cfg.min_leaf_weight,
        }
    }
}

/// Per-fold seed, a function of the master seed and the held-out section only.
pub fn fold_seed(seed: u64, section: &SectionId) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(section.as_str().as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDetail {
    pub best_step: Option<usize>,
    pub substitute_rows: Option<usize>,
}

/// Fits `spec` on the training rows and predicts the test rows.
pub fn fit_predict(
    spec: &ModelSpec,
    target: &str,
    roster: &[String],
    train_x: &[Vec<f64>],
    train_y: &[f64],
    test_x: &[Vec<f64>],
    seed: u64,
) -> Result<(Vec<f64>, FoldDetail), EvalError> {
    let none = FoldDetail { best_step: None, substitute_rows: None };
    match *spec {
        ModelSpec::Transfer(cfg) => {
            let cfg = TransferConfig { seed, ..cfg };
            let model = two_stage_fit(target, roster, train_x, train_y, test_x, &cfg)?;
            let detail = FoldDetail { best_step: Some(model.best_step), substitute_rows: Some(model.substitute_rows) };
            Ok((model.predict(roster, test_x)?, detail))
        }
        ModelSpec::SourceOnly { n_estimators, max_depth, min_leaf_weight } => {
            let x = FeatureMatrix::from_rows(train_x)?;
            let w = vec![1.0 / train_y.len() as f64; train_y.len()];
            let params = AdaBoostParams { n_estimators, tree: TreeParams { max_depth, min_leaf_weight } };
            let ens = adaboost_r2_fit(&x, train_y, &w, &vec![false; train_y.len()], &params)?;
            Ok((test_x.iter().map(|r| ens.predict(r)).collect(), none))
        }
        ModelSpec::Knn { k } => Ok((knn_fit(train_x, train_y, k)?.predict_all(test_x), none)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub section: SectionId,
    pub target: String,
    pub model: String,
    pub scores: Scores,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub detail: FoldDetail,
    /// Wall-clock seconds; not part of any deterministic output.
    pub seconds: f64,
}

/// Holds out each section in turn, trains on the rest and scores the held-out rows.
///
/// Folds run on the current rayon pool and come back in section order.
pub fn loso_cv(d: &Dataset, target: &str, spec: &ModelSpec, seed: u64) -> Result<Vec<FoldOutcome>, EvalError> {
    let sections = d.sections();
    if sections.len() < 2 {
        return Err(EvalError::TooFewSections(sections.len()));
    }
    let t = d.target_index(target).ok_or_else(|| EvalError::UnknownTarget(target.to_string()))?;
    sections.par_iter().map(|s| run_fold(d, t, target, spec, s, seed)).collect()
}

/// One fold with `section` held out. Rows are taken in (section, key) order
/// so the result does not depend on how the dataset is ordered.
pub fn run_fold(
    d: &Dataset,
    t: usize,
    target: &str,
    spec: &ModelSpec,
    section: &SectionId,
    seed: u64,
) -> Result<FoldOutcome, EvalError> {
    let start = Instant::now();
    let (mut train_x, mut train_y, mut test_x, mut actual) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut rows: Vec<&FeatureRow> = d.rows().iter().collect();
    rows.sort_by(|a, b| (&a.section, a.key).cmp(&(&b.section, b.key)));
    for r in rows {
        if &r.section == section {
            test_x.push(r.inputs.clone());
            actual.push(r.targets[t]);
        } else {
            train_x.push(r.inputs.clone());
            train_y.push(r.targets[t]);
        }
    }
    let (predicted, detail) =
        fit_predict(spec, target, d.input_names(), &train_x, &train_y, &test_x, fold_seed(seed, section))?;
    Ok(FoldOutcome {
        section: section.clone(),
        target: target.to_string(),
        model: spec.label().to_string(),
        scores: Scores::of(&actual, &predicted)?,
        actual,
        predicted,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}
