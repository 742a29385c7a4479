use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::exec::{stream_rng, Exec};

/// Percentile interval with the number of resamples that had to be redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lower: f64,
    pub upper: f64,
    pub redraws: usize,
}

/// Linear-interpolated quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Case-level percentile bootstrap of several metrics at once.
///
/// Resample `i`, attempt `a` draws from the stream `(seed, i, a)`; a resample
/// on which any metric is undefined is redrawn. Redraws across all resamples
/// are capped at `10 × n_resamples`.
pub fn bootstrap_cis<T, F>(
    cases: &[T],
    evaluate: F,
    n_resamples: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<BootstrapCi>, MetricsError>
where
    T: Clone + Sync + Send,
    F: Fn(&[T]) -> Vec<Option<f64>> + Sync + Send,
{
    if cases.is_empty() {
        return Err(MetricsError::Empty("bootstrap case list"));
    }
    if n_resamples < 100 {
        return Err(MetricsError::TooFewResamples(n_resamples));
    }
    let cap = 10 * n_resamples;
    let n = cases.len();
    let draws: Vec<(Option<Vec<f64>>, usize)> = exec.map_range(n_resamples, |i| {
        let mut buf = Vec::with_capacity(n);
        for attempt in 0..=cap {
            let mut rng = stream_rng(seed, &[i as u64, attempt as u64]);
            buf.clear();
            buf.extend((0..n).map(|_| cases[rng.random_range(0..n)].clone()));
            let vals = evaluate(&buf);
            if vals.iter().all(Option::is_some) {
                return (Some(vals.into_iter().flatten().collect()), attempt);
            }
        }
        (None, cap + 1)
    });
    let redraws: usize = draws.iter().map(|d| d.1).sum();
    if redraws > cap || draws.iter().any(|d| d.0.is_none()) {
        return Err(MetricsError::ResampleCap { redraws, cap });
    }
    let rows: Vec<Vec<f64>> = draws.into_iter().filter_map(|d| d.0).collect();
    let k = rows[0].len();
    Ok((0..k)
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            BootstrapCi { lower: percentile(&col, 0.025), upper: percentile(&col, 0.975), redraws }
        })
        .collect())
}

/// Single-metric form of [`bootstrap_cis`].
pub fn bootstrap_ci<T, F>(
    cases: &[T],
    evaluate: F,
    n_resamples: usize,
    seed: u64,
    exec: Exec,
) -> Result<BootstrapCi, MetricsError>
where
    T: Clone + Sync + Send,
    F: Fn(&[T]) -> Option<f64> + Sync + Send,
{
    let cis = bootstrap_cis(cases, |c| vec![evaluate(c)], n_resamples, seed, exec)?;
    Ok(cis[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: &[f64]) -> Option<f64> {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }

    #[test]
    fn constant_metric_is_degenerate() {
        let ci = bootstrap_ci(&[1.0, 2.0, 3.0], |_| Some(0.7), 200, 1, Exec::Sequential).unwrap();
        assert_eq!((ci.lower, ci.upper), (0.7, 0.7));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let a = bootstrap_ci(&xs, mean, 300, 9, Exec::Sequential).unwrap();
        let b = bootstrap_ci(&xs, mean, 300, 9, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let m = mean(&xs).unwrap();
        assert!(a.lower < m && m < a.upper);
    }

    #[test]
    fn redraws_counted_and_capped() {
        let xs: Vec<u32> = (0..6).collect();
        // Undefined whenever element 0 is missing (probability (5/6)^6 ≈ 0.33).
        let f = |c: &[u32]| c.contains(&0).then_some(c.len() as f64);
        let ci = bootstrap_ci(&xs, f, 200, 3, Exec::Sequential).unwrap();
        assert!(ci.redraws > 0);
        let never = bootstrap_ci(&xs, |_| None, 100, 3, Exec::Sequential);
        assert!(matches!(never, Err(MetricsError::ResampleCap { .. })));
    }

    #[test]
    fn argument_checks() {
        assert!(matches!(bootstrap_ci(&[1.0], mean, 99, 0, Exec::Sequential), Err(MetricsError::TooFewResamples(99))));
        let empty: [f64; 0] = [];
        assert!(bootstrap_ci(&empty, mean, 100, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn interpolated_percentile() {
        let v = [0.0, 10.0];
        assert_eq!(percentile(&v, 0.25), 2.5);
        assert_eq!(percentile(&[4.0], 0.975), 4.0);
    }
}
