//! Hypothesis tests: Pearson chi-square, Welch's t, Mann–Whitney U and the
//! Šidák adjustment.

mod mann_whitney;
pub mod special;

pub use mann_whitney::{mann_whitney_u, mann_whitney_u_with, MwuMode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    PearsonChiSquare,
    Welch,
    MannWhitneyExact,
    MannWhitneyNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: Option<f64>,
    pub p_value: f64,
    pub two_sided: bool,
    pub method: TestMethod,
}

/// r×c table of counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    counts: Vec<Vec<u64>>,
}

impl Contingency {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self, StatsError> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.len() < 2 || cols < 2 {
            return Err(StatsError::Domain("contingency table needs at least 2×2 cells".into()));
        }
        if counts.iter().any(|r| r.len() != cols) {
            return Err(StatsError::Domain("ragged contingency table".into()));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }
}

/// Pearson's chi-square test of independence, no continuity correction.
pub fn chi_square_test(t: &Contingency) -> Result<TestResult, StatsError> {
    let rows: Vec<f64> = t.counts.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> =
        (0..t.counts[0].len()).map(|j| t.counts.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let n: f64 = rows.iter().sum();
    if rows.iter().chain(&cols).any(|&s| s == 0.0) {
        return Err(StatsError::Domain("a row or column is all zero, so an expected count is 0".into()));
    }
    let mut stat = 0.0;
    for (i, r) in t.counts.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            stat += (o as f64 - e).powi(2) / e;
        }
    }
    let df = ((rows.len() - 1) * (cols.len() - 1)) as f64;
    Ok(TestResult {
        statistic: stat,
        df: Some(df),
        p_value: special::chi_square_sf(stat, df).clamp(0.0, 1.0),
        two_sided: false,
        method: TestMethod::PearsonChiSquare,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch's t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t(xs: &[f64], ys: &[f64]) -> Result<TestResult, StatsError> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(StatsError::Domain("each sample needs at least two values".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::Domain("non-finite sample value".into()));
    }
    let (mx, vx) = mean_var(xs);
    let (my, vy) = mean_var(ys);
    let (sx, sy) = (vx / xs.len() as f64, vy / ys.len() as f64);
    if sx + sy == 0.0 {
        return Err(StatsError::Domain("both samples have zero variance".into()));
    }
    let t = (mx - my) / (sx + sy).sqrt();
    let df = (sx + sy).powi(2) / (sx * sx / (xs.len() - 1) as f64 + sy * sy / (ys.len() - 1) as f64);
    Ok(TestResult {
        statistic: t,
        df: Some(df),
        p_value: special::student_t_two_sided(t, df).clamp(0.0, 1.0),
        two_sided: true,
        method: TestMethod::Welch,
    })
}

/// Šidák family-wise adjustment `1 - (1 - p)^m`.
pub fn sidak(p_values: &[f64], m: usize) -> Result<Vec<f64>, StatsError> {
    if m < p_values.len() {
        return Err(StatsError::Domain(format!("family size {m} smaller than {} p-values", p_values.len())));
    }
    p_values
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(StatsError::Domain(format!("p-value {p} outside [0, 1]")));
            }
            Ok((-(m as f64 * (-p).ln_1p()).exp_m1()).clamp(0.0, 1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_examples() {
        let t = Contingency::new(vec![vec![10, 20], vec![20, 10]]).unwrap();
        let r = chi_square_test(&t).unwrap();
        assert!((r.statistic - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.df, Some(1.0));
        assert!((r.p_value - 0.009_823_274_507_519_248).abs() < 1e-12);

        let swapped = Contingency::new(vec![vec![20, 10], vec![10, 20]]).unwrap();
        assert_eq!(chi_square_test(&swapped).unwrap(), r);

        let prop = Contingency::new(vec![vec![10, 20], vec![20, 40]]).unwrap();
        let r = chi_square_test(&prop).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn chi_square_errors() {
        assert!(Contingency::new(vec![vec![1, 2]]).is_err());
        assert!(Contingency::new(vec![vec![1, 2], vec![3]]).is_err());
        let zero_col = Contingency::new(vec![vec![0, 2], vec![0, 3]]).unwrap();
        assert!(chi_square_test(&zero_col).is_err());
    }

    #[test]
    fn welch_examples() {
        let r = welch_t(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r.statistic + 1.549_193_338_482_966_8).abs() < 1e-12);
        assert!((r.df.unwrap() - 2.941_176_470_588_235).abs() < 1e-12);

        let same = welch_t(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));

        let xs = [3.1, 4.7, 2.2, 5.0];
        let ys = [6.3, 5.9, 7.4];
        let a = welch_t(&xs, &ys).unwrap();
        let b = welch_t(&xs.map(|v| v * 3.7), &ys.map(|v| v * 3.7)).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-12);

        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn sidak_examples() {
        let adj = sidak(&[0.01, 0.0, 1.0], 4).unwrap();
        assert!((adj[0] - 0.039_403_99).abs() < 1e-12);
        assert_eq!((adj[1], adj[2]), (0.0, 1.0));
        assert!(sidak(&[0.1, 0.2], 1).is_err());
        assert!(sidak(&[1.5], 1).is_err());
    }
}
