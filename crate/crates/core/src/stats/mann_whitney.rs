use serde::{Deserialize, Serialize};

use super::{special, StatsError, TestMethod, TestResult};

/// How the Mann–Whitney p-value is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMode {
    /// Exact when both samples have at most [`EXACT_LIMIT`] values.
    Auto,
    Exact,
    Normal,
}

pub const EXACT_LIMIT: usize = 10;

/// Doubled midranks of the pooled sample (integers even with ties).
fn doubled_ranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 average to (i + j + 2) / 2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided p from the exact permutation distribution of the rank sum of
/// the first `n1` positions: the share of the `C(N, n1)` subsets whose sum
/// is at least as far from its mean as the observed one.
fn exact_p(ranks: &[u64], n1: usize, observed: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    let max_sum = total as usize;
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in ranks {
        let r = r as usize;
        for k in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let n = ranks.len() as u64;
    // Twice the mean doubled-rank sum, so every quantity stays integral.
    let mean2 = 2 * n1 as u64 * (n + 1);
    let dev = (2 * observed).abs_diff(mean2);
    let (mut hit, mut all) = (0.0, 0.0);
    for (s, &w) in ways[n1].iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        all += w;
        if (2 * s as u64).abs_diff(mean2) >= dev {
            hit += w;
        }
    }
    hit / all
}

pub fn mann_whitney_u(xs: &[f64], ys: &[f64]) -> Result<TestResult, StatsError> {
    mann_whitney_u_with(xs, ys, MwuMode::Auto)
}

/// Two-sided Mann–Whitney U test. The statistic is `U` of `xs`.
pub fn mann_whitney_u_with(xs: &[f64], ys: &[f64], mode: MwuMode) -> Result<TestResult, StatsError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(StatsError::Domain("both samples must be nonempty".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(StatsError::Domain("NaN in sample".into()));
    }
    let (n1, n2) = (xs.len(), ys.len());
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let r1: u64 = ranks[..n1].iter().sum();
    let u = r1 as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
    let exact = match mode {
        MwuMode::Auto => n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT,
        MwuMode::Exact => true,
        MwuMode::Normal => false,
    };
    let (p, method) = if exact {
        (exact_p(&ranks, n1, r1), TestMethod::MannWhitneyExact)
    } else {
        let n = (n1 + n2) as f64;
        let (a, b) = (n1 as f64, n2 as f64);
        let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum::<f64>() / (n * (n - 1.0));
        let var = a * b / 12.0 * ((n + 1.0) - tie_term);
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u - a * b / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
            2.0 * special::normal_sf(z)
        };
        (p, TestMethod::MannWhitneyNormal)
    };
    Ok(TestResult { statistic: u, df: None, p_value: p.clamp(0.0, 1.0), two_sided: true, method })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_exact_case() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.method, TestMethod::MannWhitneyExact);
    }

    #[test]
    fn identical_multisets() {
        let r = mann_whitney_u(&[1.0, 2.0, 2.0, 5.0], &[2.0, 5.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = mann_whitney_u_with(&[3.0; 4], &[3.0; 5], MwuMode::Normal).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn mode_selection() {
        let xs: Vec<f64> = (0..11).map(f64::from).collect();
        assert_eq!(mann_whitney_u(&xs, &[1.0]).unwrap().method, TestMethod::MannWhitneyNormal);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn ties_exact() {
        let r = mann_whitney_u(&[1.0, 2.0, 2.0, 3.0, 5.0, 5.0], &[2.0, 3.0, 3.0, 4.0, 6.0, 7.0]).unwrap();
        assert_eq!(r.statistic, 11.0);
        assert!((r.p_value - 68.0 / 231.0).abs() < 1e-14);
    }
}
