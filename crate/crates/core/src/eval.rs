//! Forecast metrics and the persistence baseline.

use std::fmt;

use ndarray::Array1;
use thiserror::Error;

use crate::ingest::WindowSample;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no values to score")]
    Empty,
    #[error("length mismatch: {truth} targets, {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("every target is zero; MAPE is undefined")]
    AllZeroTargets,
}

fn check(y: &[f64], yhat: &[f64]) -> Result<(), EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch {
            truth: y.len(),
            pred: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    Ok(mse(y, yhat)?.sqrt())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error in percent, over the terms with `y ≠ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub value: f64,
    pub excluded: usize,
}

pub fn mape(y: &[f64], yhat: &[f64]) -> Result<Mape, EvalError> {
    check(y, yhat)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (a, b) in y.iter().zip(yhat) {
        if *a != 0.0 {
            total += ((a - b) / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(EvalError::AllZeroTargets);
    }
    Ok(Mape {
        value: 100.0 * total / used as f64,
        excluded: y.len() - used,
    })
}

/// Which scale metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricsOn {
    #[default]
    Normalized,
    Raw,
}

impl MetricsOn {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
        }
    }
}

impl std::str::FromStr for MetricsOn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(format!("unknown metrics scale {other:?} (normalized or raw)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dataset_tag: String,
    pub model_tag: String,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub n_samples: usize,
    pub excluded_mape_terms: usize,
}

pub const METRICS_HEADER: &str = "dataset, model, rmse, mae, mape, n, excluded_mape_terms";

impl MetricsReport {
    pub fn compute(dataset: &str, model: &str, y: &[f64], yhat: &[f64]) -> Result<Self, EvalError> {
        let m = mape(y, yhat)?;
        Ok(Self {
            dataset_tag: dataset.to_string(),
            model_tag: model.to_string(),
            rmse: rmse(y, yhat)?,
            mae: mae(y, yhat)?,
            mape: m.value,
            n_samples: y.len(),
            excluded_mape_terms: m.excluded,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {}, {}, {}, {}, {}, {}",
            self.dataset_tag, self.model_tag, self.rmse, self.mae, self.mape, self.n_samples, self.excluded_mape_terms
        )
    }
}

/// Repeat the last observed target value `q` times for every sample.
pub fn persistence_baseline(samples: &[WindowSample], target_index: usize, q: usize) -> Vec<Array1<f64>> {
    samples
        .iter()
        .map(|s| {
            let last = s.features[[s.features.nrows() - 1, target_index]];
            Array1::from_elem(q, last)
        })
        .collect()
}

/// Flatten per-sample target vectors in sample order.
pub fn flatten(rows: &[Array1<f64>]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn hand_cases() {
        assert_eq!(rmse(&[2.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[2.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(mape(&[2.0], &[1.0]).unwrap().value, 50.0);
        assert_eq!(rmse(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mape(&[1.0, -1.0], &[0.0, 0.0]).unwrap().value, 100.0);
        let y = [0.3, -2.0, 5.0];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mape(&y, &y).unwrap().value, 0.0);
    }

    #[test]
    fn zero_targets_are_excluded() {
        let m = mape(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m, Mape { value: 50.0, excluded: 1 });
        assert_eq!(mape(&[0.0], &[1.0]), Err(EvalError::AllZeroTargets));
        assert_eq!(rmse(&[], &[]), Err(EvalError::Empty));
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn report_row() {
        let r = MetricsReport::compute("syn", "persistence", &[2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(r.to_string(), format!("syn, persistence, {}, 0.5, 50, 2, 1", 0.5f64.sqrt()));
    }

    #[test]
    fn persistence_repeats_last_target() {
        let mut features = Array2::zeros((3, 2));
        features[[2, 1]] = 7.0;
        let s = WindowSample {
            features,
            target: Array1::zeros(3),
            window_end: 2,
        };
        let p = persistence_baseline(&[s], 1, 3);
        assert_eq!(p[0].to_vec(), vec![7.0, 7.0, 7.0]);
    }
}
