//! Diagnostic performance metrics for models and readers.

mod bootstrap;
mod detection;
mod reader;
mod report;
mod roc;

pub use bootstrap::{bootstrap_ci, bootstrap_cis, percentile, BootstrapCi};
pub use detection::{average_precision, mean_average_precision, GroundTruthBox, MapReport, ScoredDetection};
pub use reader::{
    automation_bias, f1_sd, population_sd, timing_report, weekly_f1_sd, AssistEvent, AutomationBias, TimingReport,
    WeekBin, WeeklyF1, WeeklyReport,
};
pub use report::{evaluate, EvaluateOptions, MetricReport, ReportRow};
pub use roc::{rater_auc, roc_auc};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Diagnosis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("all confusion counts are zero")]
    EmptyCounts,
    #[error("ROC analysis needs at least one positive and one negative")]
    SingleClass,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("at least 100 bootstrap resamples are required, got {0}")]
    TooFewResamples(usize),
    #[error("metric undefined on {redraws} redrawn resamples (cap {cap})")]
    ResampleCap { redraws: usize, cap: usize },
    #[error("inconsistent assist event for case {0}")]
    InconsistentEvent(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// 3×3 counts; rows are ground truth, columns predictions, both in
/// `Diagnosis::ALL` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix3 {
    pub fn new(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn from_pairs<I: IntoIterator<Item = (Diagnosis, Diagnosis)>>(pairs: I) -> Self {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: Diagnosis, pred: Diagnosis) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn get(&self, truth: Diagnosis, pred: Diagnosis) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: Diagnosis) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    pub fn col_sum(&self, pred: Diagnosis) -> u64 {
        self.counts.iter().map(|r| r[pred.index()]).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts from paired binary outcomes.
    pub fn from_outcomes<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> Self {
        let mut c = Self::default();
        for (truth, pred) in pairs {
            match (truth, pred) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

pub fn one_vs_rest(cm: &ConfusionMatrix3, cls: Diagnosis) -> BinaryCounts {
    let tp = cm.get(cls, cls);
    let fn_ = cm.row_sum(cls) - tp;
    let fp = cm.col_sum(cls) - tp;
    BinaryCounts { tp, fp, tn: cm.total() - tp - fn_ - fp, fn_ }
}

/// Fractions in `[0, 1]` (Youden in `[-1, 1]`); `None` where a denominator
/// is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub f1: Option<f64>,
    pub youden: Option<f64>,
    pub auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn binary_metrics(c: &BinaryCounts) -> Result<MetricRow, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    Ok(MetricRow {
        sensitivity,
        specificity,
        accuracy: ratio(c.tp + c.tn, c.total()),
        fnr: sensitivity.map(|s| 1.0 - s),
        fpr: specificity.map(|s| 1.0 - s),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        youden: sensitivity.zip(specificity).map(|(se, sp)| se + sp - 1.0),
        auc: None,
    })
}

impl MetricRow {
    pub const FIELDS: [&'static str; 8] =
        ["sensitivity", "specificity", "accuracy", "fnr", "fpr", "f1", "youden", "auc"];

    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.sensitivity,
            self.specificity,
            self.accuracy,
            self.fnr,
            self.fpr,
            self.f1,
            self.youden,
            self.auc,
        ]
    }

    fn from_values(v: [Option<f64>; 8]) -> Self {
        Self {
            sensitivity: v[0],
            specificity: v[1],
            accuracy: v[2],
            fnr: v[3],
            fpr: v[4],
            f1: v[5],
            youden: v[6],
            auc: v[7],
        }
    }
}

/// Unweighted mean per field. A field undefined in some rows averages over
/// the rows that define it.
pub fn macro_average(rows: &[MetricRow]) -> Result<MetricRow, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty("metric row list"));
    }
    let mut out = [None; 8];
    for (k, slot) in out.iter_mut().enumerate() {
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.values()[k]).collect();
        if !defined.is_empty() {
            *slot = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    Ok(MetricRow::from_values(out))
}

/// Rounds half to even at `decimals` places.
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    // Clean binary noise before testing for the exact half.
    let scaled = (x * s * 1e6).round() / 1e6;
    scaled.round_ties_even() / s
}

/// Fraction as a percentage rounded to two decimals.
pub fn pct(x: f64) -> f64 {
    round_to(100.0 * x, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier_one_vs_rest() {
        let cm = ConfusionMatrix3::new([[495, 0, 0], [0, 21, 0], [0, 0, 70]]);
        assert_eq!(one_vs_rest(&cm, Diagnosis::Cl), BinaryCounts::new(21, 0, 565, 0));
    }

    #[test]
    fn empty_class_row() {
        let cm = ConfusionMatrix3::new([[10, 1, 0], [0, 0, 0], [2, 0, 5]]);
        let c = one_vs_rest(&cm, Diagnosis::Cl);
        assert_eq!((c.tp, c.fn_), (0, 0));
        assert_eq!(c.fp, 1);
        let row = binary_metrics(&c).unwrap();
        assert_eq!(row.sensitivity, None);
        assert_eq!(row.fnr, None);
    }

    #[test]
    fn clp_row() {
        let row = binary_metrics(&BinaryCounts::new(67, 3, 513, 3)).unwrap();
        assert_eq!(pct(row.sensitivity.unwrap()), 95.71);
        assert_eq!(pct(row.specificity.unwrap()), 99.42);
        assert_eq!(pct(row.accuracy.unwrap()), 98.98);
        assert_eq!(pct(row.f1.unwrap()), 95.71);
        assert_eq!(round_to(row.youden.unwrap(), 2), 0.95);
    }

    #[test]
    fn cl_sensitivity() {
        let row = binary_metrics(&BinaryCounts::new(18, 0, 100, 3)).unwrap();
        assert_eq!(pct(row.sensitivity.unwrap()), 85.71);
    }

    #[test]
    fn all_zero_counts() {
        assert_eq!(binary_metrics(&BinaryCounts::default()), Err(MetricsError::EmptyCounts));
    }

    #[test]
    fn macro_rows() {
        let row = |auc: f64, sens: f64| MetricRow { auc: Some(auc), sensitivity: Some(sens), ..Default::default() };
        let m = macro_average(&[row(98.25, 99.60), row(90.72, 85.71), row(97.75, 95.71)]).unwrap();
        assert_eq!(round_to(m.auc.unwrap(), 2), 95.57);
        assert_eq!(round_to(m.sensitivity.unwrap(), 2), 93.67);
        let single = binary_metrics(&BinaryCounts::new(5, 1, 7, 2)).unwrap();
        assert_eq!(macro_average(&[single]).unwrap(), single);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn youden_from_rates() {
        assert_eq!(round_to(0.9367 + 0.9859 - 1.0, 4), 0.9226);
        assert_eq!(round_to(0.9226, 2), 0.92);
    }

    #[test]
    fn half_even() {
        assert_eq!(round_to(0.125, 2), 0.12);
        assert_eq!(round_to(0.135, 2), 0.14);
        assert_eq!(round_to(2.5, 0), 2.0);
    }
}
