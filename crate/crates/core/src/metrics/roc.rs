use super::{binary_metrics, BinaryCounts, MetricsError};

/// Area under the empirical ROC curve, trapezoidal over all thresholds.
/// Tied scores contribute one diagonal segment, so ties count one half.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64, MetricsError> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(MetricsError::Invalid("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Walk thresholds from high to low; each tie group adds a trapezoid of
    // width dfp between heights tp and tp + dtp.
    let mut tp = 0u64;
    let mut area2 = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let (mut dtp, mut dfp) = (0u64, 0u64);
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        // Twice the trapezoid area in count units.
        area2 += u128::from(dfp) * u128::from(2 * tp + dtp);
        tp += dtp;
    }
    Ok(area2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// AUC of a single operating point: the ROC through (0,0), (1-spec, sens)
/// and (1,1) encloses `(sens + spec) / 2`.
pub fn rater_auc(c: &BinaryCounts) -> Result<f64, MetricsError> {
    let row = binary_metrics(c)?;
    match (row.sensitivity, row.specificity) {
        (Some(se), Some(sp)) => Ok((se + sp) / 2.0),
        _ => Err(MetricsError::SingleClass),
    }
}
