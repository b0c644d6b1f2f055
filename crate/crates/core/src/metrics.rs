//! Evaluation metrics over flattened predictions.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric inputs have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("metric needs at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
}

pub fn mse_metric(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::TooShort { need: 1, got: 0 });
    }
    let s: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Pearson correlation; `defined` is false (and `value` 0) when either input
/// has zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pcc {
    pub value: f64,
    pub defined: bool,
}

pub fn pcc_metric(pred: &[f64], truth: &[f64]) -> Result<Pcc, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(MetricError::TooShort {
            need: 2,
            got: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut spt, mut spp, mut stt) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(truth) {
        let (x, y) = (a - mp, b - mt);
        spt += x * y;
        spp += x * x;
        stt += y * y;
    }
    if spp == 0.0 || stt == 0.0 {
        return Ok(Pcc {
            value: 0.0,
            defined: false,
        });
    }
    Ok(Pcc {
        value: (spt / (spp.sqrt() * stt.sqrt())).clamp(-1.0, 1.0),
        defined: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_metric(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_metric(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse_metric(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse_metric(&[], &[]).is_err());
    }

    #[test]
    fn pcc_examples() {
        let t = [1.0, 2.0, 4.0, 3.0];
        assert!((pcc_metric(&t, &t).unwrap().value - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((pcc_metric(&neg, &t).unwrap().value + 1.0).abs() < 1e-15);
        let flat = pcc_metric(&[2.0; 4], &t).unwrap();
        assert!(!flat.defined);
        assert_eq!(flat.value, 0.0);
    }
}
