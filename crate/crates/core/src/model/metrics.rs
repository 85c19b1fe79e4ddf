use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean of per-class accuracies over classes present in the evaluated data.
    pub weighted_accuracy: f64,
    /// `None` for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub loss: f64,
}

impl EvalMetrics {
    pub(crate) fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        loss: f64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let mut correct = vec![0usize; num_classes];
        let mut total = vec![0usize; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            total[y] += 1;
            if p == y {
                correct[y] += 1;
            }
        }
        let per_class_accuracy: Vec<Option<f64>> = correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect();
        let accuracy = correct.iter().sum::<usize>() as f64 / labels.len() as f64;
        Ok(EvalMetrics {
            accuracy,
            weighted_accuracy: weighted_accuracy(&per_class_accuracy),
            per_class_accuracy,
            loss,
        })
    }
}

/// `Σ_c acc_c / C` over the classes that have an accuracy.
pub fn weighted_accuracy(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = EvalMetrics::from_predictions(&[0, 1, 1, 2], &[0, 1, 1, 2], 3, 0.0).unwrap();
        assert_eq!(m.weighted_accuracy, 1.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn two_classes_half() {
        let m = EvalMetrics::from_predictions(&[0, 0, 0, 0, 0], &[0, 0, 0, 1, 1], 2, 0.0).unwrap();
        assert_eq!(m.weighted_accuracy, 0.5);
        assert_eq!(m.accuracy, 0.6);
    }

    #[test]
    fn crafted_three_class() {
        // class 0: 3/3, class 1: 2/4, class 2: 0/2 -> (1 + 0.5 + 0) / 3
        let labels = [0, 0, 0, 1, 1, 1, 1, 2, 2];
        let preds = [0, 0, 0, 1, 1, 0, 2, 0, 1];
        let m = EvalMetrics::from_predictions(&preds, &labels, 3, 0.0).unwrap();
        assert_eq!(
            m.per_class_accuracy,
            vec![Some(1.0), Some(0.5), Some(0.0)]
        );
        assert_eq!(m.weighted_accuracy, 0.5);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let m = EvalMetrics::from_predictions(&[0, 2], &[0, 2], 4, 0.0).unwrap();
        assert_eq!(m.per_class_accuracy, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(m.weighted_accuracy, 1.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(EvalMetrics::from_predictions(&[], &[], 2, 0.0).is_err());
    }
}
