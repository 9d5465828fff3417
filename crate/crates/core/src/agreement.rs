//! Nominal Krippendorff's alpha, majority-vote gold standards, and
//! recomputation of alpha with a model appended as one more coder.
//!
//! Alpha is evaluated from per-unit label tallies: a unit with `m` pairable
//! values and label counts `n_c` contributes `(m² − Σ n_c²) / (m − 1)` of
//! off-diagonal coincidence mass, and the expected disagreement only needs
//! the integer label marginals. This is algebraically the same as summing
//! the off-diagonal cells of [`coincidence_matrix`], but the result does not
//! depend on label or coder order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationRecord, LabelSpace, Task};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgreementError {
    #[error("no unit has two or more codings")]
    NoPairableUnits,
    #[error("alpha undefined: single-label data (expected disagreement is zero)")]
    SingleLabel,
    #[error("unit {unit:?} already has a coding from {coder:?}")]
    DuplicateCoding { unit: String, coder: String },
    #[error("label {label:?} on unit {unit:?} is outside the {task} label set")]
    Vocabulary { unit: String, label: String, task: Task },
}

/// Units × coders grid of nominal labels; missing cells are allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReliabilityMatrix {
    units: BTreeMap<String, BTreeMap<String, String>>,
}

impl ReliabilityMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the matrix from all records of `task`.
    pub fn from_annotations(records: &[AnnotationRecord], task: Task) -> Result<Self, AgreementError> {
        let mut m = Self::new();
        for r in records.iter().filter(|r| r.task == task) {
            m.insert(&r.unit_id, &r.annotator_id, &r.label)?;
        }
        Ok(m)
    }

    /// Builds a matrix from rows of codings, one row per unit, `None` for a missing cell.
    pub fn from_rows<S: AsRef<str>>(rows: &[Vec<Option<S>>]) -> Self {
        let mut m = Self::new();
        for (u, row) in rows.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if let Some(label) = cell {
                    m.insert(&format!("u{u:06}"), &format!("c{c:03}"), label.as_ref())
                        .expect("fresh cell");
                }
            }
        }
        m
    }

    pub fn insert(&mut self, unit: &str, coder: &str, label: &str) -> Result<(), AgreementError> {
        let row = self.units.entry(unit.to_string()).or_default();
        if row.contains_key(coder) {
            return Err(AgreementError::DuplicateCoding {
                unit: unit.to_string(),
                coder: coder.to_string(),
            });
        }
        row.insert(coder.to_string(), label.to_string());
        Ok(())
    }

    pub fn units(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.units.iter().map(|(u, row)| (u.as_str(), row))
    }

    pub fn coders(&self) -> BTreeSet<&str> {
        self.units.values().flat_map(|r| r.keys().map(String::as_str)).collect()
    }

    /// Distinct labels among pairable values, sorted.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .units
            .values()
            .filter(|r| r.len() >= 2)
            .flat_map(|r| r.values())
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Labels of one unit, in coder order.
    pub fn codings(&self, unit: &str) -> Vec<&str> {
        self.units
            .get(unit)
            .map(|r| r.values().map(String::as_str).collect())
            .unwrap_or_default()
    }
}

/// Label-pair mass matrix over [`ReliabilityMatrix::labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceMatrix {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl CoincidenceMatrix {
    pub fn marginals(&self) -> Vec<f64> {
        self.cells.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().flatten().sum()
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.cells[i][j])
    }
}

/// Each ordered pair of codings within a unit of `m` codings adds `1/(m−1)` to its cell.
pub fn coincidence_matrix(m: &ReliabilityMatrix) -> Result<CoincidenceMatrix, AgreementError> {
    let labels = m.labels();
    if labels.is_empty() {
        return Err(AgreementError::NoPairableUnits);
    }
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let k = labels.len();
    let mut cells = vec![vec![0.0; k]; k];
    for (_, row) in m.units() {
        let mu = row.len();
        if mu < 2 {
            continue;
        }
        let w = 1.0 / (mu - 1) as f64;
        let vals: Vec<usize> = row.values().map(|l| index[l.as_str()]).collect();
        for (i, &a) in vals.iter().enumerate() {
            for (j, &b) in vals.iter().enumerate() {
                if i != j {
                    cells[a][b] += w;
                }
            }
        }
    }
    Ok(CoincidenceMatrix { labels, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    /// Observed disagreement, Do.
    pub observed: f64,
    /// Expected disagreement, De.
    pub expected: f64,
    /// Total number of pairable values.
    pub n_pairable: u64,
    pub units_pairable: usize,
}

/// Nominal Krippendorff's alpha.
pub fn krippendorff_alpha(m: &ReliabilityMatrix) -> Result<AlphaResult, AgreementError> {
    let mut n: u64 = 0;
    let mut units_pairable = 0;
    let mut off_diagonal = 0.0;
    let mut marginals: BTreeMap<&str, u64> = BTreeMap::new();
    for (_, row) in m.units() {
        let mu = row.len() as u64;
        if mu < 2 {
            continue;
        }
        let mut tally: BTreeMap<&str, u64> = BTreeMap::new();
        for label in row.values() {
            *tally.entry(label.as_str()).or_default() += 1;
        }
        let same: u64 = tally.values().map(|c| c * c).sum();
        off_diagonal += (mu * mu - same) as f64 / (mu - 1) as f64;
        for (label, c) in tally {
            *marginals.entry(label).or_default() += c;
        }
        n += mu;
        units_pairable += 1;
    }
    if units_pairable == 0 {
        return Err(AgreementError::NoPairableUnits);
    }
    let n2 = (n as u128) * (n as u128);
    let expected_pairs = n2 - marginals.values().map(|&c| (c as u128) * (c as u128)).sum::<u128>();
    if expected_pairs == 0 {
        return Err(AgreementError::SingleLabel);
    }
    let expected_pairs = expected_pairs as f64;
    let nf = n as f64;
    Ok(AlphaResult {
        alpha: 1.0 - (nf - 1.0) * off_diagonal / expected_pairs,
        observed: off_diagonal / nf,
        expected: expected_pairs / (nf * (nf - 1.0)),
        n_pairable: n,
        units_pairable,
    })
}

/// Recomputes alpha with `labels` added as the codings of one more coder.
///
/// Every label must belong to `space`; units the humans did not code are
/// accepted but contribute nothing unless another coder covers them.
pub fn alpha_with_model<'a, I>(
    m: &ReliabilityMatrix,
    model_id: &str,
    labels: I,
    space: &LabelSpace,
) -> Result<AlphaResult, AgreementError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut extended = m.clone();
    let coder = format!("model:{model_id}");
    for (unit, label) in labels {
        if !space.contains(label) {
            return Err(AgreementError::Vocabulary {
                unit: unit.to_string(),
                label: label.to_string(),
                task: space.task,
            });
        }
        extended.insert(unit, &coder, label)?;
    }
    krippendorff_alpha(&extended)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldStatus {
    Majority,
    ReviewRequired,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub unit_id: String,
    pub task: Task,
    pub label: Option<String>,
    pub status: GoldStatus,
}

/// A reviewer's decision for a unit without a clear majority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub unit_id: String,
    pub task: Task,
    pub label: String,
    pub reviewer: String,
}

/// The label held by more than half of `labels`, if any.
pub fn strict_majority<S: AsRef<str>>(labels: &[S]) -> Option<&str> {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *tally.entry(l.as_ref()).or_default() += 1;
    }
    tally
        .into_iter()
        .find(|&(_, c)| 2 * c > labels.len())
        .map(|(l, _)| l)
}

/// Gold status for one unit's codings.
pub fn majority_gold<S: AsRef<str>>(unit_id: &str, task: Task, labels: &[S]) -> GoldRecord {
    match strict_majority(labels) {
        Some(l) => GoldRecord {
            unit_id: unit_id.to_string(),
            task,
            label: Some(l.to_string()),
            status: GoldStatus::Majority,
        },
        None => GoldRecord {
            unit_id: unit_id.to_string(),
            task,
            label: None,
            status: GoldStatus::ReviewRequired,
        },
    }
}

/// Gold records for every unit of `task`, with review resolutions applied.
///
/// A resolution replaces the majority outcome of its unit and marks it
/// `reviewed`. Resolutions for units without annotations are ignored.
pub fn build_gold(
    records: &[AnnotationRecord],
    task: Task,
    resolutions: &[Resolution],
    space: &LabelSpace,
) -> Result<Vec<GoldRecord>, AgreementError> {
    let mut by_unit: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.task == task) {
        by_unit.entry(&r.unit_id).or_default().push(&r.label);
    }
    let mut resolved: BTreeMap<&str, &str> = BTreeMap::new();
    for r in resolutions.iter().filter(|r| r.task == task) {
        if !space.contains(&r.label) {
            return Err(AgreementError::Vocabulary {
                unit: r.unit_id.clone(),
                label: r.label.clone(),
                task,
            });
        }
        resolved.insert(&r.unit_id, &r.label);
    }
    Ok(by_unit
        .into_iter()
        .map(|(unit, labels)| match resolved.get(unit) {
            Some(label) => GoldRecord {
                unit_id: unit.to_string(),
                task,
                label: Some(label.to_string()),
                status: GoldStatus::Reviewed,
            },
            None => majority_gold(unit, task, &labels),
        })
        .collect())
}
