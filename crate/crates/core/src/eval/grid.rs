use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::knn::DEFAULT_K_GRID;
use super::loso::{loso_cv, ModelSpec};
use super::EvalError;
use crate::correction::Dataset;
use crate::transfer::TransferConfig;

/// Hyperparameter values searched per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub max_depth: Vec<usize>,
    pub n_estimators: Vec<usize>,
    pub n_neighbors: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            max_depth: vec![5, 10, 15, 20, 25],
            n_estimators: vec![50, 100, 150, 200, 250],
            n_neighbors: DEFAULT_K_GRID.to_vec(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [("max_depth", &self.max_depth), ("n_estimators", &self.n_estimators), ("n_neighbors", &self.n_neighbors)] {
            if v.is_empty() {
                return Err(EvalError::InvalidGrid(format!("{name} is empty")));
            }
            if v.contains(&0) {
                return Err(EvalError::InvalidGrid(format!("{name} contains 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridModel {
    Transfer,
    SourceOnly,
    Knn,
}

impl std::str::FromStr for GridModel {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "transfer" | "tra" => Ok(Self::Transfer),
            "source_only" | "source-only" | "ada" => Ok(Self::SourceOnly),
            "knn" => Ok(Self::Knn),
            other => Err(EvalError::InvalidGrid(format!("unknown model {other:?}"))),
        }
    }
}

/// Model specs of a grid, ordered by max_depth, then n_estimators (or by k).
pub fn expand(model: GridModel, grid: &GridSpec, base: &TransferConfig) -> Vec<ModelSpec> {
    let mut depths = grid.max_depth.clone();
    let mut ests = grid.n_estimators.clone();
    let mut ks = grid.n_neighbors.clone();
    for v in [&mut depths, &mut ests, &mut ks] {
        v.sort_unstable();
        v.dedup();
    }
    match model {
        GridModel::Knn => ks.into_iter().map(|k| ModelSpec::Knn { k }).collect(),
        GridModel::Transfer | GridModel::SourceOnly => depths
            .iter()
            .flat_map(|&max_depth| {
                ests.iter().map(move |&n_estimators| {
                    let cfg = TransferConfig { max_depth, n_estimators, ..*base };
                    match model {
                        GridModel::Transfer => ModelSpec::Transfer(cfg),
                        _ => ModelSpec::source_only_like(&cfg),
                    }
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub spec: ModelSpec,
    pub max_depth: Option<usize>,
    pub n_estimators: Option<usize>,
    pub n_neighbors: Option<usize>,
    pub mean_mae: f64,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub target: String,
    pub model: String,
    pub rows: Vec<GridRow>,
    pub best: usize,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }
}

fn hyper(spec: &ModelSpec) -> (Option<usize>, Option<usize>, Option<usize>) {
    match *spec {
        ModelSpec::Transfer(c) => (Some(c.max_depth), Some(c.n_estimators), None),
        ModelSpec::SourceOnly { max_depth, n_estimators, .. } => (Some(max_depth), Some(n_estimators), None),
        ModelSpec::Knn { k } => (None, None, Some(k)),
    }
}

/// Scores every grid point (or a seeded subsample of `budget` points) by mean
/// leave-one-section-out MAE. Ties go to the earlier point in grid order.
pub fn grid_search(
    d: &Dataset,
    target: &str,
    model: GridModel,
    grid: &GridSpec,
    base: &TransferConfig,
    seed: u64,
    budget: Option<usize>,
) -> Result<GridResult, EvalError> {
    grid.validate()?;
    let mut specs = expand(model, grid, base);
    if let Some(b) = budget {
        if b == 0 {
            return Err(EvalError::InvalidGrid("budget must be >= 1".into()));
        }
        if b < specs.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = rand::seq::index::sample(&mut rng, specs.len(), b).into_vec();
            keep.sort_unstable();
            specs = keep.into_iter().map(|i| specs[i]).collect();
        }
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let folds = loso_cv(d, target, &spec, seed)?;
        let n = folds.len() as f64;
        let (max_depth, n_estimators, n_neighbors) = hyper(&spec);
        log::info!("grid {target} {spec:?}: {} folds", folds.len());
        rows.push(GridRow {
            spec,
            max_depth,
            n_estimators,
            n_neighbors,
            mean_mae: folds.iter().map(|f| f.scores.mae).sum::<f64>() / n,
            mean_rmse: folds.iter().map(|f| f.scores.rmse).sum::<f64>() / n,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.mean_mae < rows[b].mean_mae { i } else { b });
    Ok(GridResult { target: target.to_string(), model: format!("{model:?}"), rows, best })
}
