//! Confusion matrices and per-class / averaged classification metrics.
//!
//! Undefined ratios (a class never predicted, or never present) evaluate to
//! zero and raise the matching `*_undefined` flag on the class row.

use std::io;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {truth} true labels vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("duplicate label {0:?} in the label set")]
    DuplicateLabel(String),
    #[error("confusion matrix is empty")]
    Empty,
    #[error("confusion matrix is not square over its labels")]
    Shape,
}

/// Rows are true labels, columns predicted labels, both in `labels` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(MetricsError::Shape);
        }
        Ok(Self { labels, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// CSV with predicted labels as header and true labels in the first column.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["true\\pred".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.counts) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tallies `(true, pred)` pairs over a fixed label order.
pub fn confusion<S: AsRef<str>>(
    truth: &[S],
    pred: &[S],
    labels: &[S],
) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let labels: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(MetricsError::DuplicateLabel(l.clone()));
        }
    }
    let index = |s: &str| {
        labels
            .iter()
            .position(|l| l == s)
            .ok_or_else(|| MetricsError::UnknownLabel(s.to_string()))
    };
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (t, p) in truth.iter().zip(pred) {
        counts[index(t.as_ref())?][index(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub classes: Vec<ClassRow>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub total: u64,
}

impl ClassMetrics {
    pub fn class(&self, label: &str) -> Option<&ClassRow> {
        self.classes.iter().find(|c| c.label == label)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Precision, recall, F1 and support per class, plus macro / weighted averages and accuracy.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassMetrics, MetricsError> {
    let total = cm.total();
    if cm.labels.is_empty() || total == 0 {
        return Err(MetricsError::Empty);
    }
    let classes: Vec<ClassRow> = cm
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let tp = cm.counts[i][i];
            let support = cm.row_sum(i);
            let predicted = cm.col_sum(i);
            let (precision, precision_undefined) = ratio(tp, predicted);
            let (recall, recall_undefined) = ratio(tp, support);
            // Harmonic mean of precision and recall, as 2TP / (2TP + FP + FN).
            let f1 = if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (support + predicted) as f64
            };
            ClassRow {
                label: label.clone(),
                precision,
                recall,
                f1,
                support,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();

    let k = classes.len() as f64;
    let macro_avg = Averages {
        precision: classes.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: classes.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: classes.iter().map(|c| c.f1).sum::<f64>() / k,
    };
    let n = total as f64;
    let weighted = |f: fn(&ClassRow) -> f64| {
        classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / n
    };
    let weighted_avg = Averages {
        precision: weighted(|c| c.precision),
        recall: weighted(|c| c.recall),
        f1: weighted(|c| c.f1),
    };
    let trace: u64 = (0..cm.labels.len()).map(|i| cm.counts[i][i]).sum();
    Ok(ClassMetrics {
        classes,
        macro_avg,
        weighted_avg,
        accuracy: trace as f64 / n,
        total,
    })
}

/// Macro-averaged F1 over `labels` for paired label sequences.
pub fn macro_f1<S: AsRef<str>>(truth: &[S], pred: &[S], labels: &[S]) -> Result<f64, MetricsError> {
    Ok(classification_report(&confusion(truth, pred, labels)?)?.macro_avg.f1)
}
