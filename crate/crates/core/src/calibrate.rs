//! Distance threshold selection by macro F1.
//!
//! Every distinct labeling a threshold can induce is reachable from the
//! candidate grid: observed distances, midpoints between neighbours, and one
//! value beyond each end. Among the thresholds that reach the best macro F1,
//! the smallest labeling (fewest matches) wins; it is reported through the
//! grid point that sits strictly between its last matched distance and the
//! next observed one, so the chosen cut-off never coincides with data.

use serde::{Deserialize, Serialize};

use crate::corpus::UNKNOWN_LABEL;
use crate::evalmetrics::MetricsError;

/// Offset of the two outer candidates from the observed extremes.
pub const SWEEP_EPSILON: f64 = 1e-6;

/// Macro F1 values closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("no distances to calibrate on")]
    Empty,
    #[error("non-finite distance {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One face with its closest-gallery distance and its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCase {
    pub distance: f64,
    pub truth: String,
    pub best_person: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub macro_f1: f64,
    pub sweep: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Sorted unique distances, their midpoints, and one value beyond each end.
pub fn candidate_thresholds(distances: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    if let Some(bad) = distances.iter().find(|d| !d.is_finite()) {
        return Err(CalibrationError::NonFinite(*bad));
    }
    let mut uniq = distances.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let (first, last) = match (uniq.first(), uniq.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(CalibrationError::Empty),
    };
    let mut out = Vec::with_capacity(uniq.len() * 2 + 1);
    out.push(first - SWEEP_EPSILON);
    for pair in uniq.windows(2) {
        out.push(pair[0]);
        out.push((pair[0] + pair[1]) / 2.0);
    }
    out.push(last);
    out.push(last + SWEEP_EPSILON);
    Ok(out)
}

/// Sorted union of truth labels, best persons and `"Unknown"`.
pub fn default_labels(cases: &[CalibrationCase]) -> Vec<String> {
    let mut labels: Vec<String> = cases
        .iter()
        .flat_map(|c| [c.truth.clone(), c.best_person.clone()])
        .chain(std::iter::once(UNKNOWN_LABEL.to_string()))
        .collect();
    labels.sort();
    labels.dedup();
    labels
}

struct Tally {
    unknown: usize,
    /// Per case: (truth index, best-person index).
    idx: Vec<(usize, usize)>,
    diag: Vec<u64>,
    row: Vec<u64>,
    col: Vec<u64>,
}

impl Tally {
    fn new(cases: &[CalibrationCase], labels: &[String]) -> Result<Self, CalibrationError> {
        let find = |s: &str| {
            labels
                .iter()
                .position(|l| l == s)
                .ok_or_else(|| MetricsError::UnknownLabel(s.to_string()))
        };
        let unknown = find(UNKNOWN_LABEL)?;
        let idx = cases
            .iter()
            .map(|c| Ok((find(&c.truth)?, find(&c.best_person)?)))
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let k = labels.len();
        let mut t = Tally {
            unknown,
            idx,
            diag: vec![0; k],
            row: vec![0; k],
            col: vec![0; k],
        };
        // Below every distance all faces are predicted unknown.
        for &(truth, _) in &t.idx {
            t.row[truth] += 1;
            t.col[unknown] += 1;
            if truth == unknown {
                t.diag[unknown] += 1;
            }
        }
        Ok(t)
    }

    /// Moves case `i` from the unknown column to its best-person column.
    fn accept(&mut self, i: usize) {
        let (truth, best) = self.idx[i];
        self.col[self.unknown] -= 1;
        if truth == self.unknown {
            self.diag[self.unknown] -= 1;
        }
        self.col[best] += 1;
        if truth == best {
            self.diag[best] += 1;
        }
    }

    /// Same arithmetic and summation order as `evalmetrics::classification_report`.
    fn macro_f1(&self) -> f64 {
        let k = self.diag.len();
        let sum: f64 = (0..k)
            .map(|c| {
                if self.diag[c] == 0 {
                    0.0
                } else {
                    (2 * self.diag[c]) as f64 / (self.row[c] + self.col[c]) as f64
                }
            })
            .sum();
        sum / k as f64
    }
}

/// Macro F1 at every threshold in `candidates` (which must be ascending).
pub fn sweep(
    cases: &[CalibrationCase],
    labels: &[String],
    candidates: &[f64],
) -> Result<Vec<(f64, f64)>, CalibrationError> {
    if cases.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let mut tally = Tally::new(cases, labels)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].distance.total_cmp(&cases[b].distance));
    let mut next = 0;
    let mut out = Vec::with_capacity(candidates.len());
    for &t in candidates {
        while next < order.len() && cases[order[next]].distance <= t {
            tally.accept(order[next]);
            next += 1;
        }
        out.push((t, tally.macro_f1()));
    }
    Ok(out)
}

/// Index of the smallest threshold whose F1 ties the maximum.
pub fn best_index(sweep: &[(f64, f64)]) -> Option<usize> {
    let best = sweep.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    sweep.iter().position(|s| s.1 >= best - TIE_TOLERANCE)
}

/// Macro F1 of the labeling induced by a single threshold.
pub fn evaluate_threshold(
    cases: &[CalibrationCase],
    labels: &[String],
    threshold: f64,
) -> Result<f64, CalibrationError> {
    Ok(sweep(cases, labels, &[threshold])?[0].1)
}

/// Chooses the threshold that maximizes macro F1 over `labels`.
pub fn optimize_threshold(
    cases: &[CalibrationCase],
    labels: &[String],
) -> Result<CalibrationResult, CalibrationError> {
    let distances: Vec<f64> = cases.iter().map(|c| c.distance).collect();
    let candidates = candidate_thresholds(&distances)?;
    let sweep = sweep(cases, labels, &candidates)?;
    let mut i = best_index(&sweep).ok_or(CalibrationError::Empty)?;
    // Odd grid positions are observed distances; the next point induces the same labeling.
    if i % 2 == 1 {
        i += 1;
    }
    let (threshold, macro_f1) = sweep[i];

    let mut warnings = Vec::new();
    if !cases.iter().any(|c| c.truth == c.best_person) {
        warnings.push("no true-match cases: every face's truth differs from its closest person".into());
    }
    if !cases.iter().any(|c| c.truth != c.best_person) {
        warnings.push("no impostor cases: every face's truth equals its closest person".into());
    }
    for w in &warnings {
        log::warn!("calibration: {w}");
    }
    Ok(CalibrationResult {
        threshold,
        macro_f1,
        sweep,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::{classification_report, confusion};
    use crate::facematch::label_for;
    use proptest::prelude::*;

    fn case(d: f64, truth: &str, best: &str) -> CalibrationCase {
        CalibrationCase {
            distance: d,
            truth: truth.into(),
            best_person: best.into(),
        }
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn candidate_grid_examples() {
        let e = SWEEP_EPSILON;
        assert_close(&candidate_thresholds(&[0.3, 0.5]).unwrap(), &[0.3 - e, 0.3, 0.4, 0.5, 0.5 + e]);
        assert_close(&candidate_thresholds(&[0.7]).unwrap(), &[0.7 - e, 0.7, 0.7 + e]);
        assert_close(
            &candidate_thresholds(&[0.2, 0.9, 0.2]).unwrap(),
            &[0.2 - e, 0.2, 0.55, 0.9, 0.9 + e],
        );
        assert_eq!(candidate_thresholds(&[]), Err(CalibrationError::Empty));
    }

    #[test]
    fn separable_data_picks_midpoint() {
        let cases = [
            case(0.3, "A", "A"),
            case(0.5, "A", "A"),
            case(0.8, "Unknown", "A"),
            case(0.9, "Unknown", "A"),
        ];
        let labels = default_labels(&cases);
        let r = optimize_threshold(&cases, &labels).unwrap();
        assert!((r.threshold - 0.65).abs() < 1e-12);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn one_class_data_warns() {
        let cases = [case(0.2, "A", "A"), case(0.4, "A", "A")];
        let labels = default_labels(&cases);
        let r = optimize_threshold(&cases, &labels).unwrap();
        assert!((r.threshold - (0.4 + SWEEP_EPSILON)).abs() < 1e-15);
        assert_eq!(r.warnings.len(), 1);
        let truth = ["A", "A"];
        let pred: Vec<String> = cases.iter().map(|c| label_for(&c.best_person, c.distance, r.threshold)).collect();
        let pred: Vec<&str> = pred.iter().map(String::as_str).collect();
        let report = classification_report(&confusion(&truth, &pred, &["A", "Unknown"]).unwrap()).unwrap();
        assert_eq!(report.class("A").unwrap().f1, 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(optimize_threshold(&[], &["Unknown".into()]), Err(CalibrationError::Empty));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let cases = [case(0.2, "A", "B")];
        assert!(optimize_threshold(&cases, &["A".into(), "Unknown".into()]).is_err());
    }

    fn cases_strategy() -> impl Strategy<Value = Vec<CalibrationCase>> {
        let names = prop::sample::select(vec!["A", "B", "C"]);
        let truth = prop::sample::select(vec!["A", "B", "C", "Unknown"]);
        prop::collection::vec(((0u32..40).prop_map(|d| d as f64 / 20.0), truth, names), 1..40)
            .prop_map(|v| v.into_iter().map(|(d, t, b)| case(d, t, b)).collect())
    }

    proptest! {
        #[test]
        fn reported_f1_matches_classification_report(cases in cases_strategy()) {
            let labels = default_labels(&cases);
            let r = optimize_threshold(&cases, &labels).unwrap();
            let truth: Vec<&str> = cases.iter().map(|c| c.truth.as_str()).collect();
            let pred: Vec<String> = cases.iter().map(|c| label_for(&c.best_person, c.distance, r.threshold)).collect();
            let pred: Vec<&str> = pred.iter().map(String::as_str).collect();
            let lab: Vec<&str> = labels.iter().map(String::as_str).collect();
            let report = classification_report(&confusion(&truth, &pred, &lab).unwrap()).unwrap();
            prop_assert_eq!(report.macro_avg.f1, r.macro_f1);
            prop_assert!(r.sweep.iter().all(|s| s.1 <= r.macro_f1 + TIE_TOLERANCE));
        }

        #[test]
        fn extra_candidates_never_lower_the_optimum(cases in cases_strategy(), extra in prop::collection::vec(-0.5f64..2.5, 0..10)) {
            let labels = default_labels(&cases);
            let distances: Vec<f64> = cases.iter().map(|c| c.distance).collect();
            let base = candidate_thresholds(&distances).unwrap();
            let mut more = base.clone();
            more.extend(extra);
            more.sort_by(f64::total_cmp);
            let best = |c: &[f64]| sweep(&cases, &labels, c).unwrap().iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(best(&more) >= best(&base));
        }
    }
}
