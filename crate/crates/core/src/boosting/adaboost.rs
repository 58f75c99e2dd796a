use serde::{Deserialize, Serialize};

use super::{check_weights, BoostError, FeatureMatrix, RegressionTree, TreeParams};

/// β used when a round fits its weighted data perfectly.
pub const PERFECT_BETA: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaBoostParams {
    pub n_estimators: usize,
    pub tree: TreeParams,
}

impl Default for AdaBoostParams {
    fn default() -> Self {
        Self { n_estimators: 50, tree: TreeParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Ensemble {
    pub trees: Vec<RegressionTree>,
    pub betas: Vec<f64>,
}

impl R2Ensemble {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(row)).collect();
        let weights: Vec<f64> = self.betas.iter().map(|b| (1.0 / b).ln()).collect();
        weighted_median(&preds, &weights)
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Vec<f64> {
        let weights: Vec<f64> = self.betas.iter().map(|b| (1.0 / b).ln()).collect();
        let mut preds = vec![0.0; self.trees.len()];
        (0..x.n_rows())
            .map(|i| {
                for (p, t) in preds.iter_mut().zip(&self.trees) {
                    *p = t.predict(x.row(i));
                }
                weighted_median(&preds, &weights)
            })
            .collect()
    }
}

/// Smallest value whose cumulative weight reaches half the total.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(values.len(), weights.len());
    assert!(!values.is_empty(), "weighted median of nothing");
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let half = 0.5 * weights.iter().sum::<f64>();
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum >= half {
            return values[i];
        }
    }
    values[*order.last().unwrap()]
}

/// Linear-loss adjusted errors `|ŷ − y| / max |ŷ − y|`; all zero when the maximum is zero.
pub fn adjusted_errors(predictions: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(predictions.len(), y.len());
    let abs: Vec<f64> = predictions.iter().zip(y).map(|(p, t)| (p - t).abs()).collect();
    let d = abs.iter().cloned().fold(0.0, f64::max);
    if d == 0.0 {
        vec![0.0; abs.len()]
    } else {
        abs.into_iter().map(|a| a / d).collect()
    }
}

/// State after one boosting round, for instrumentation.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub epsilon: f64,
    /// `None` when the round was discarded.
    pub beta: Option<f64>,
    pub unfrozen_mass_before: f64,
    pub unfrozen_mass_after: f64,
    pub weights: Vec<f64>,
}

/// AdaBoost.R2 with linear loss. Frozen instances keep their weights; the
/// unfrozen mass is rescaled to its pre-round value after each update.
pub fn adaboost_r2_fit(
    x: &FeatureMatrix,
    y: &[f64],
    init_weights: &[f64],
    frozen: &[bool],
    params: &AdaBoostParams,
) -> Result<R2Ensemble, BoostError> {
    fit_core(x, y, init_weights, frozen, None, params, &mut |_| {}).map(|(e, _)| e)
}

/// As [`adaboost_r2_fit`], reporting every round and returning the final weights.
pub fn adaboost_r2_fit_observed(
    x: &FeatureMatrix,
    y: &[f64],
    init_weights: &[f64],
    frozen: &[bool],
    params: &AdaBoostParams,
    observer: &mut dyn FnMut(&RoundRecord),
) -> Result<(R2Ensemble, Vec<f64>), BoostError> {
    fit_core(x, y, init_weights, frozen, None, params, observer)
}

/// Rows with `active[i] == false` are treated as absent: zero weight and no
/// say in the error normalization.
pub(crate) fn fit_core(
    x: &FeatureMatrix,
    y: &[f64],
    init_weights: &[f64],
    frozen: &[bool],
    active: Option<&[bool]>,
    params: &AdaBoostParams,
    observer: &mut dyn FnMut(&RoundRecord),
) -> Result<(R2Ensemble, Vec<f64>), BoostError> {
    let n = x.n_rows();
    if y.len() != n || frozen.len() != n || active.is_some_and(|a| a.len() != n) {
        return Err(BoostError::DimensionMismatch("targets, weights and masks must match rows".into()));
    }
    if params.n_estimators == 0 {
        return Err(BoostError::InvalidParameter("n_estimators must be >= 1".into()));
    }
    let is_active = |i: usize| active.is_none_or(|a| a[i]);
    let mut w: Vec<f64> = (0..n).map(|i| if is_active(i) { init_weights[i] } else { 0.0 }).collect();
    check_weights(&w, n)?;
    if !(0..n).any(|i| is_active(i) && !frozen[i]) {
        return Err(BoostError::NoUnfrozenInstances);
    }
    let mut trees = Vec::new();
    let mut betas = Vec::new();
    let mut abs = vec![0.0; n];
    for round in 1..=params.n_estimators {
        let tree = RegressionTree::fit(x, y, &w, &params.tree)?;
        let mut d = 0.0f64;
        for i in (0..n).filter(|&i| is_active(i)) {
            abs[i] = (tree.predict(x.row(i)) - y[i]).abs();
            d = d.max(abs[i]);
        }
        let total: f64 = w.iter().sum();
        let e = |i: usize| if d > 0.0 { abs[i] / d } else { 0.0 };
        let epsilon: f64 = (0..n).filter(|&i| is_active(i)).map(|i| w[i] / total * e(i)).sum();
        let mass: f64 = (0..n).filter(|&i| !frozen[i]).map(|i| w[i]).sum();
        let mut record = RoundRecord {
            round,
            epsilon,
            beta: None,
            unfrozen_mass_before: mass,
            unfrozen_mass_after: mass,
            weights: Vec::new(),
        };
        if epsilon >= 0.5 {
            if round == 1 {
                trees.push(tree);
                betas.push(1.0 - PERFECT_BETA);
                record.beta = betas.last().copied();
            }
            record.weights = w.clone();
            observer(&record);
            break;
        }
        if epsilon <= 0.0 {
            trees.push(tree);
            betas.push(PERFECT_BETA);
            record.beta = Some(PERFECT_BETA);
            record.weights = w.clone();
            observer(&record);
            break;
        }
        let beta = epsilon / (1.0 - epsilon);
        for i in (0..n).filter(|&i| is_active(i) && !frozen[i]) {
            w[i] *= beta.powf(1.0 - e(i));
        }
        let updated: f64 = (0..n).filter(|&i| !frozen[i]).map(|i| w[i]).sum();
        if updated > 0.0 {
            let scale = mass / updated;
            for i in (0..n).filter(|&i| !frozen[i]) {
                w[i] *= scale;
            }
        }
        trees.push(tree);
        betas.push(beta);
        record.beta = Some(beta);
        record.unfrozen_mass_after = (0..n).filter(|&i| !frozen[i]).map(|i| w[i]).sum();
        record.weights = w.clone();
        observer(&record);
    }
    Ok((R2Ensemble { trees, betas }, w))
}
