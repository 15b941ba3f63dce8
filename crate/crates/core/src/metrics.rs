//! Confusion matrix and precision / recall / F1, per class, macro and micro.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// One-vs-rest scores from counts; a zero denominator gives 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            // same as 2PR/(P+R) but exact in floating point
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(flatten)]
    pub prf: Prf,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Prf,
    pub micro_avg: Prf,
}

impl MetricsReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::Data("cannot compute metrics on an empty set".into()));
        }
        if predicted.len() != labels.len() {
            return Err(Error::Data(format!("{} predictions for {} labels", predicted.len(), labels.len())));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= num_classes || y >= num_classes {
                return Err(Error::Data(format!("class index outside {num_classes} classes (pred {p}, label {y})")));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let (mut tp_sum, mut fp_sum, mut fn_sum) = (0, 0, 0);
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let (fp, fn_) = (predicted - tp, support - tp);
                tp_sum += tp;
                fp_sum += fp;
                fn_sum += fn_;
                ClassMetrics { prf: Prf::from_counts(tp, fp, fn_), support }
            })
            .collect();
        let mean = |f: fn(&Prf) -> f64| per_class.iter().map(|m| f(&m.prf)).sum::<f64>() / k.max(1) as f64;
        let macro_avg = Prf { precision: mean(|p| p.precision), recall: mean(|p| p.recall), f1: mean(|p| p.f1) };
        Self {
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            micro_avg: Prf::from_counts(tp_sum, fp_sum, fn_sum),
            macro_avg,
            per_class,
            confusion,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
