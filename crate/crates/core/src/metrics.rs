//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::normalized_change_rate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub norm_changes: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Per-class F1 (with 0/0 taken as 0) and their unweighted mean over all `k`
/// classes, including classes absent from both predictions and labels.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<EvalResult> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        for label in [p, y] {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        confusion[y][p] += 1;
    }
    let per_class_f1: Vec<f64> = (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let fp = (0..k).map(|y| confusion[y][c]).sum::<usize>() as f64 - tp;
            let fn_ = confusion[c].iter().sum::<usize>() as f64 - tp;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect();
    let macro_f1 = if k == 0 { 0.0 } else { per_class_f1.iter().sum::<f64>() / k as f64 };
    Ok(EvalResult { macro_f1, per_class_f1, norm_changes: normalized_change_rate(preds), confusion })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let r = macro_f1(&y, &y, 3).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.norm_changes, 0.75);
    }

    #[test]
    fn constant_prediction_against_uniform_labels() {
        let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let preds = vec![3; 80];
        let r = macro_f1(&preds, &labels, 8).unwrap();
        for (c, f) in r.per_class_f1.iter().enumerate() {
            let expect = if c == 3 { 2.0 / 9.0 } else { 0.0 };
            assert!((f - expect).abs() < 1e-12);
        }
        assert!((r.macro_f1 - 1.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_count_as_zero() {
        let r = macro_f1(&[0, 0], &[0, 0], 4).unwrap();
        assert_eq!(r.per_class_f1, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.macro_f1, 0.25);
    }

    #[test]
    fn errors() {
        assert!(matches!(macro_f1(&[0], &[0, 1], 2), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(macro_f1(&[5], &[0], 2), Err(Error::LabelOutOfRange { label: 5, .. })));
    }
}
