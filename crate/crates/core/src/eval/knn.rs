use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::transfer::Standardizer;

/// Default neighbour grid.
pub const DEFAULT_K_GRID: [usize; 10] = [1, 3, 5, 7, 9, 11, 13, 15, 17, 19];

/// K-nearest-neighbour regressor on inputs standardized by training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub standardizer: Standardizer,
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

pub fn knn_fit(x: &[Vec<f64>], y: &[f64], k: usize) -> Result<KnnModel, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch { actual: y.len(), predicted: x.len() });
    }
    if x.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if k == 0 || k > x.len() {
        return Err(EvalError::KTooLarge { k, n: x.len() });
    }
    let standardizer = Standardizer::fit(x);
    Ok(KnnModel { k, rows: standardizer.apply_all(x), targets: y.to_vec(), standardizer })
}

impl KnnModel {
    /// Mean target of the `k` nearest rows; equal distances go to the lower row index.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let q = self.standardizer.apply(x);
        let mut d: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, order);
            d.truncate(self.k);
        }
        d.sort_by(order);
        d.iter().map(|&(_, i)| self.targets[i]).sum::<f64>() / self.k as f64
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}
