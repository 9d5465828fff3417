//! Contingency-table statistics.
//!
//! - Pearson chi-squared test of independence, optionally Yates-corrected
//! - upper-tail chi-squared probability via the regularized incomplete gamma
//! - Cramér's V
//! - Bonferroni adjustment

use serde::{Deserialize, Serialize};

const MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("table needs at least 2 rows and 2 columns, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("ragged table: row {0} has a different length")]
    Ragged(usize),
    #[error("degenerate table: {0}")]
    Degenerate(String),
}

/// Lanczos approximation (g = 7, n = 9), relative error below 1e-15 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx).
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma Q(a, x) for a > 0, x ≥ 0.
///
/// Series for P when x < a + 1, modified Lentz continued fraction for Q otherwise.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_q requires a > 0");
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * f64::EPSILON {
                break;
            }
        }
        1.0 - sum * log_prefactor.exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < f64::EPSILON {
                break;
            }
        }
        log_prefactor.exp() * h
    }
}

/// Upper-tail probability of the chi-squared distribution, Q(dof/2, x/2).
pub fn chi2_sf(x: f64, dof: u32) -> f64 {
    assert!(dof > 0, "chi2_sf requires dof > 0");
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquared {
    pub chi2: f64,
    pub dof: u32,
    pub n: u64,
    pub min_expected: f64,
    pub warnings: Vec<String>,
}

/// Pearson chi-squared statistic with expected counts `row_i · col_j / n`.
///
/// With `yates`, each `|obs − exp|` is reduced by 0.5 (floored at zero); the
/// correction only applies to one-degree-of-freedom tables.
pub fn chi_squared(table: &[Vec<u64>], yates: bool) -> Result<ChiSquared, StatsError> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if let Some(i) = table.iter().position(|r| r.len() != cols) {
        return Err(StatsError::Ragged(i));
    }
    if rows < 2 || cols < 2 {
        return Err(StatsError::Shape { rows, cols });
    }
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let n: u64 = row_sums.iter().sum();
    if n == 0 {
        return Err(StatsError::Degenerate("table total is zero".into()));
    }
    if let Some(i) = row_sums.iter().position(|&s| s == 0) {
        return Err(StatsError::Degenerate(format!("row {i} is all zero")));
    }
    if let Some(j) = col_sums.iter().position(|&s| s == 0) {
        return Err(StatsError::Degenerate(format!("column {j} is all zero")));
    }
    let dof = ((rows - 1) * (cols - 1)) as u32;
    let apply_yates = yates && dof == 1;
    let mut warnings = Vec::new();
    if yates && !apply_yates {
        warnings.push("continuity correction ignored: table has more than one degree of freedom".into());
    }
    let nf = n as f64;
    let mut chi2 = 0.0;
    let mut min_expected = f64::INFINITY;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_sums[i] as f64 * col_sums[j] as f64 / nf;
            min_expected = min_expected.min(expected);
            let mut diff = (obs as f64 - expected).abs();
            if apply_yates {
                diff = (diff - 0.5).max(0.0);
            }
            chi2 += diff * diff / expected;
        }
    }
    if min_expected < 1.0 {
        warnings.push(format!(
            "expected count below 1 (minimum {min_expected:.3}); the chi-squared approximation may be unreliable"
        ));
    }
    Ok(ChiSquared {
        chi2,
        dof,
        n,
        min_expected,
        warnings,
    })
}

/// `sqrt(chi2 / (n · (min(rows, cols) − 1)))`, clamped to `[0, 1]`.
pub fn cramers_v(chi2: f64, n: u64, rows: usize, cols: usize) -> f64 {
    let k = rows.min(cols);
    if n == 0 || k < 2 {
        return 0.0;
    }
    (chi2 / (n as f64 * (k - 1) as f64)).sqrt().clamp(0.0, 1.0)
}

/// `min(1, p · m)`.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m.max(1) as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub test_id: String,
    pub table: Vec<Vec<u64>>,
    pub chi2: f64,
    pub dof: u32,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_adjusted: Option<f64>,
    pub cramers_v: f64,
    pub n: u64,
    pub warnings: Vec<String>,
}

/// Chi-squared test, p-value and Cramér's V for one table.
pub fn independence_test(test_id: &str, table: &[Vec<u64>], yates: bool) -> Result<StatTestResult, StatsError> {
    let cs = chi_squared(table, yates)?;
    let rows = table.len();
    let cols = table[0].len();
    Ok(StatTestResult {
        test_id: test_id.to_string(),
        table: table.to_vec(),
        chi2: cs.chi2,
        dof: cs.dof,
        p: chi2_sf(cs.chi2, cs.dof),
        p_adjusted: None,
        cramers_v: cramers_v(cs.chi2, cs.n, rows, cols),
        n: cs.n,
        warnings: cs.warnings,
    })
}
