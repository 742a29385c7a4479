use serde::{Deserialize, Serialize};

use super::{binary_metrics, BinaryCounts, MetricsError};
use crate::fusion::Diagnosis;

/// Population standard deviation.
pub fn population_sd(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Spread of F1 scores across gestational-week bins.
pub fn f1_sd(f1s: &[f64]) -> Option<f64> {
    population_sd(f1s)
}

/// Gestational-week bins; the sparse tails are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeekBin {
    #[serde(rename = "18-20")]
    W18To20,
    #[serde(rename = "21")]
    W21,
    #[serde(rename = "22")]
    W22,
    #[serde(rename = "23")]
    W23,
    #[serde(rename = "24")]
    W24,
    #[serde(rename = "25-28")]
    W25To28,
}

impl WeekBin {
    pub const ALL: [WeekBin; 6] =
        [WeekBin::W18To20, WeekBin::W21, WeekBin::W22, WeekBin::W23, WeekBin::W24, WeekBin::W25To28];

    /// `None` outside 18–28.
    pub fn of(week: u8) -> Option<Self> {
        Some(match week {
            18..=20 => WeekBin::W18To20,
            21 => WeekBin::W21,
            22 => WeekBin::W22,
            23 => WeekBin::W23,
            24 => WeekBin::W24,
            25..=28 => WeekBin::W25To28,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeekBin::W18To20 => "18-20",
            WeekBin::W21 => "21",
            WeekBin::W22 => "22",
            WeekBin::W23 => "23",
            WeekBin::W24 => "24",
            WeekBin::W25To28 => "25-28",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyF1 {
    pub bin: WeekBin,
    pub cases: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyReport {
    pub bins: Vec<WeeklyF1>,
    /// Bins with no cases, or where F1 is undefined (no cleft in truth or
    /// prediction).
    pub skipped: Vec<WeekBin>,
    /// Cases outside 18–28 weeks.
    pub out_of_range: usize,
    pub sd: Option<f64>,
}

/// Cleft-versus-control F1 per week bin and its population SD.
/// Input items are `(gestational week, truth, prediction)`.
pub fn weekly_f1_sd(cases: &[(u8, Diagnosis, Diagnosis)]) -> WeeklyReport {
    let mut counts = [BinaryCounts::default(); 6];
    let mut sizes = [0usize; 6];
    let mut out_of_range = 0;
    for &(week, truth, pred) in cases {
        let Some(bin) = WeekBin::of(week) else {
            out_of_range += 1;
            continue;
        };
        let k = bin as usize;
        sizes[k] += 1;
        counts[k] = BinaryCounts {
            tp: counts[k].tp + u64::from(truth.is_cleft() && pred.is_cleft()),
            fp: counts[k].fp + u64::from(!truth.is_cleft() && pred.is_cleft()),
            tn: counts[k].tn + u64::from(!truth.is_cleft() && !pred.is_cleft()),
            fn_: counts[k].fn_ + u64::from(truth.is_cleft() && !pred.is_cleft()),
        };
    }
    let mut bins = Vec::new();
    let mut skipped = Vec::new();
    for bin in WeekBin::ALL {
        let k = bin as usize;
        match binary_metrics(&counts[k]).ok().and_then(|r| r.f1) {
            Some(f1) if sizes[k] > 0 => bins.push(WeeklyF1 { bin, cases: sizes[k], f1 }),
            _ => skipped.push(bin),
        }
    }
    let f1s: Vec<f64> = bins.iter().map(|b| b.f1).collect();
    WeeklyReport { sd: population_sd(&f1s), bins, skipped, out_of_range }
}

/// One AI-assisted read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistEvent {
    pub case_id: String,
    pub ai_correct: bool,
    pub reader_followed_ai: bool,
    pub reader_correct: bool,
}

impl AssistEvent {
    /// Following the assistant makes the reader exactly as right as it.
    pub fn is_consistent(&self) -> bool {
        !self.reader_followed_ai || self.reader_correct == self.ai_correct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutomationBias {
    pub ai_incorrect: u64,
    pub followed_when_incorrect: u64,
    pub ai_correct: u64,
    pub followed_when_correct: u64,
    /// Share of AI-incorrect cases where the reader followed the AI.
    pub overreliance: Option<f64>,
    /// Share of AI-correct cases where the reader followed the AI.
    pub appropriate_reliance: Option<f64>,
    /// Share of AI-correct cases where the reader overrode the AI.
    pub rejected_when_correct: Option<f64>,
}

pub fn automation_bias(events: &[AssistEvent]) -> Result<AutomationBias, MetricsError> {
    if events.is_empty() {
        return Err(MetricsError::Empty("assist event list"));
    }
    if let Some(e) = events.iter().find(|e| !e.is_consistent()) {
        return Err(MetricsError::InconsistentEvent(e.case_id.clone()));
    }
    let count = |f: &dyn Fn(&AssistEvent) -> bool| events.iter().filter(|e| f(e)).count() as u64;
    let ai_incorrect = count(&|e| !e.ai_correct);
    let followed_when_incorrect = count(&|e| !e.ai_correct && e.reader_followed_ai);
    let ai_correct = count(&|e| e.ai_correct);
    let followed_when_correct = count(&|e| e.ai_correct && e.reader_followed_ai);
    let frac = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    let appropriate_reliance = frac(followed_when_correct, ai_correct);
    Ok(AutomationBias {
        ai_incorrect,
        followed_when_incorrect,
        ai_correct,
        followed_when_correct,
        overreliance: frac(followed_when_incorrect, ai_incorrect),
        appropriate_reliance,
        rejected_when_correct: appropriate_reliance.map(|a| 1.0 - a),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub cases: usize,
    /// `None` when there are no timed cases.
    pub mean_seconds: Option<f64>,
    pub total_hours: f64,
}

impl TimingReport {
    pub fn from_mean(mean_seconds: f64, cases: usize) -> Self {
        Self { cases, mean_seconds: Some(mean_seconds), total_hours: mean_seconds * cases as f64 / 3600.0 }
    }
}

/// Mean seconds per case and total hours for `case_count` cases at that
/// mean.
pub fn timing_report(seconds: &[f64], case_count: usize) -> Result<TimingReport, MetricsError> {
    if seconds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(MetricsError::Invalid("durations must be finite and non-negative".into()));
    }
    if seconds.is_empty() {
        return Ok(TimingReport { cases: case_count, mean_seconds: None, total_hours: 0.0 });
    }
    let mean = seconds.iter().sum::<f64>() / seconds.len() as f64;
    Ok(TimingReport::from_mean(mean, case_count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::round_to;

    #[test]
    fn table_sds() {
        let model = [100.00, 99.80, 82.40, 93.91, 94.32, 93.96];
        assert_eq!(round_to(f1_sd(&model).unwrap(), 2), 5.84);
        assert_eq!(f1_sd(&[90.0; 6]), Some(0.0));
    }

    #[test]
    fn week_bins() {
        assert_eq!(WeekBin::of(19), Some(WeekBin::W18To20));
        assert_eq!(WeekBin::of(27), Some(WeekBin::W25To28));
        assert_eq!(WeekBin::of(16), None);
    }

    #[test]
    fn weekly_report_skips_empty_bins() {
        use Diagnosis::*;
        let cases = [(19, Cl, Cl), (19, Control, Control), (22, Clp, Control), (22, Clp, Clp), (15, Cl, Cl)];
        let r = weekly_f1_sd(&cases);
        assert_eq!(r.out_of_range, 1);
        assert_eq!(r.bins.len(), 2);
        assert_eq!(r.bins[0].f1, 1.0);
        assert!((r.bins[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.skipped, vec![WeekBin::W21, WeekBin::W23, WeekBin::W24, WeekBin::W25To28]);
        assert!((r.sd.unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    fn events(wrong: usize, followed_wrong: usize, right: usize, followed_right: usize) -> Vec<AssistEvent> {
        let mut v = Vec::new();
        for i in 0..wrong {
            let followed = i < followed_wrong;
            v.push(AssistEvent { case_id: format!("w{i}"), ai_correct: false, reader_followed_ai: followed, reader_correct: !followed });
        }
        for i in 0..right {
            let followed = i < followed_right;
            v.push(AssistEvent { case_id: format!("r{i}"), ai_correct: true, reader_followed_ai: followed, reader_correct: followed });
        }
        v
    }

    #[test]
    fn overreliance_rates() {
        let b = automation_bias(&events(17, 2, 100, 95)).unwrap();
        assert_eq!(round_to(100.0 * b.overreliance.unwrap(), 1), 11.8);
        assert_eq!(round_to(100.0 * b.appropriate_reliance.unwrap(), 1), 95.0);
        let b = automation_bias(&events(17, 1, 0, 0)).unwrap();
        assert_eq!(round_to(100.0 * b.overreliance.unwrap(), 1), 5.9);
        assert_eq!(b.appropriate_reliance, None);
        let b = automation_bias(&events(5, 0, 5, 0)).unwrap();
        assert_eq!(b.overreliance, Some(0.0));
        let b = automation_bias(&events(0, 0, 5, 5)).unwrap();
        assert_eq!(b.overreliance, None);
    }

    #[test]
    fn inconsistent_event_rejected() {
        let e = AssistEvent { case_id: "x".into(), ai_correct: true, reader_followed_ai: true, reader_correct: false };
        assert!(matches!(automation_bias(&[e]), Err(MetricsError::InconsistentEvent(_))));
    }

    #[test]
    fn timing() {
        let t = TimingReport::from_mean(0.32, 3168);
        assert_eq!(round_to(t.total_hours, 2), 0.28);
        let t = timing_report(&[], 0).unwrap();
        assert_eq!((t.mean_seconds, t.total_hours), (None, 0.0));
        let t = timing_report(&[10.0, 11.08], 3168).unwrap();
        assert!((t.mean_seconds.unwrap() - 10.54).abs() < 1e-12);
        assert!((t.total_hours - 9.34).abs() / 9.34 < 0.01);
        assert!(timing_report(&[-1.0], 1).is_err());
    }
}
