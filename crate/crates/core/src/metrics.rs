//! Confusion matrices and the scores derived from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Stage;
use crate::{Error, Result, N_CLASSES};

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::data(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if let Some(bad) = truth.iter().chain(predicted).find(|&&c| c >= N_CLASSES) {
            return Err(Error::data(format!("label {bad} out of range")));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub stage: Stage,
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

/// Classes absent from both truth and predictions get precision, recall
/// and F1 of 0, which pulls the macro F1 down.
pub fn metrics_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("confusion matrix is empty"));
    }
    let n = total as f64;
    let row: Vec<u64> = cm.counts.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..N_CLASSES)
        .map(|c| cm.counts.iter().map(|r| r[c]).sum())
        .collect();
    let trace: u64 = (0..N_CLASSES).map(|c| cm.counts[c][c]).sum();

    let per_class: Vec<ClassMetrics> = Stage::ALL
        .iter()
        .map(|&stage| {
            let c = stage.index();
            let tp = cm.counts[c][c];
            let fn_ = row[c] - tp;
            let fp = col[c] - tp;
            let tn = total - tp - fn_ - fp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                stage,
                tp,
                fn_,
                fp,
                tn,
                precision,
                recall,
                f1,
                sensitivity: recall,
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect();

    let p_o = trace as f64 / n;
    let p_e: f64 = row
        .iter()
        .zip(&col)
        .map(|(&r, &c)| (r as f64 / n) * (c as f64 / n))
        .sum();
    // Chance agreement of 1 only happens when truth and predictions are the
    // same single class, which is perfect agreement.
    let kappa = if (1.0 - p_e).abs() < f64::EPSILON {
        1.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    Ok(MetricsReport {
        total,
        accuracy: p_o,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / N_CLASSES as f64,
        kappa,
        per_class,
        confusion: *cm,
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "epochs {}  ACC {:.1}  MF1 {:.1}  kappa {:.3}",
            self.total,
            100.0 * self.accuracy,
            100.0 * self.macro_f1,
            self.kappa
        );
        let _ = writeln!(
            s,
            "{:<5}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "stage", "TP", "FN", "sens", "spec", "prec", "F1"
        );
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<5}{:>8}{:>8}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
                m.stage.name(),
                m.tp,
                m.fn_,
                m.sensitivity,
                m.specificity,
                m.precision,
                m.f1
            );
        }
        s
    }
}
