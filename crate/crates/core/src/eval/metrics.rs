use serde::{Deserialize, Serialize};

use super::EvalError;

/// Targets with magnitude below this are left out of MAPE.
pub const MAPE_ZERO_TOL: f64 = 1e-9;

fn check(y: &[f64], yhat: &[f64]) -> Result<(), EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { actual: y.len(), predicted: yhat.len() });
    }
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (b - a).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check(y, yhat)?;
    Ok((y.iter().zip(yhat).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Mean absolute percentage error in percent, and the number of zero targets skipped.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<(f64, usize), EvalError> {
    check(y, yhat)?;
    let (mut sum, mut used) = (0.0, 0usize);
    for (a, b) in y.iter().zip(yhat) {
        if a.abs() >= MAPE_ZERO_TOL {
            sum += ((b - a) / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(EvalError::AllTargetsZero);
    }
    Ok((100.0 * sum / used as f64, y.len() - used))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Absent when every target is zero.
    pub mape: Option<f64>,
    pub mape_skipped: usize,
}

impl Scores {
    pub fn of(y: &[f64], yhat: &[f64]) -> Result<Self, EvalError> {
        let (mape, mape_skipped) = match mape(y, yhat) {
            Ok((m, s)) => (Some(m), s),
            Err(EvalError::AllTargetsZero) => (None, y.len()),
            Err(e) => return Err(e),
        };
        Ok(Self { n: y.len(), mae: mae(y, yhat)?, rmse: rmse(y, yhat)?, mape, mape_skipped })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Mae => Some(self.mae),
            Metric::Rmse => Some(self.rmse),
            Metric::Mape => self.mape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mae,
    Rmse,
    Mape,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Rmse, Metric::Mape];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::Mape => "mape",
        }
    }
}
