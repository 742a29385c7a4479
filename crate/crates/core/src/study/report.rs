use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::engine::Study;
use super::{subgroup_label, Arm, ExamSet, Phase, StudyError, Tier};
use crate::exec::{stable_hash, Exec};
use crate::fusion::Diagnosis;
use crate::metrics::{binary_metrics, bootstrap_ci, macro_average, one_vs_rest, ConfusionMatrix3};
use crate::stats::{mann_whitney_u, sidak, TestResult};

/// Most frequent label; ties go to the more severe diagnosis.
pub fn majority_vote(votes: &[Diagnosis]) -> Option<Diagnosis> {
    let mut counts = [0usize; 3];
    for v in votes {
        counts[v.index()] += 1;
    }
    let best = *counts.iter().max()?;
    (best > 0).then(|| {
        Diagnosis::ALL.iter().rev().copied().find(|d| counts[d.index()] == best).expect("some class has the maximum")
    })
}

/// Macro one-vs-rest means of one reader on one set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderScore {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    /// `T-TG-1` style label, or the tier when arms are not used.
    pub label: String,
    pub arm: Option<Arm>,
    pub tier: Tier,
    pub participants: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// 95% percentile bootstrap over participants; absent below two.
    pub sensitivity_ci: Option<(f64, f64)>,
    pub specificity_ci: Option<(f64, f64)>,
    pub accuracy_ci: Option<(f64, f64)>,
}

/// Arm comparison within one tier on one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub tier: Tier,
    pub set: ExamSet,
    pub n_traditional: usize,
    pub n_ai: usize,
    pub test: TestResult,
    /// Šidák-adjusted over all comparisons of the cycle.
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set: ExamSet,
    pub rows: Vec<SubgroupRow>,
}

/// Fixed-set sensitivity of one subgroup after one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub cycle: u32,
    pub label: String,
    pub sensitivity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u32,
    pub sets: Vec<SetReport>,
    pub comparisons: Vec<ArmComparison>,
    pub retention: Vec<RetentionPoint>,
    /// Analyses that were skipped or degenerate, in words.
    pub notes: Vec<String>,
}

/// Tier first so each tier's two arms sit next to each other.
type GroupKey = (Tier, Option<Arm>);

fn group_label(k: GroupKey) -> String {
    match k.1 {
        Some(arm) => subgroup_label(arm, k.0),
        None => k.0.to_string(),
    }
}

/// Per-participant scores on the exam cases of `set` in `cycle`.
fn reader_scores(study: &Study, cycle: u32, set: ExamSet) -> BTreeMap<String, ReaderScore> {
    let mut cms: BTreeMap<&str, ConfusionMatrix3> = BTreeMap::new();
    for a in study.answers().iter().filter(|a| a.cycle == cycle && a.phase == Phase::Exam && a.set == set) {
        let truth = study.pools().get(&a.case_id).expect("answered case is in the pools").truth;
        cms.entry(&a.participant).or_default().add(truth, a.diagnosis);
    }
    cms.into_iter()
        .filter_map(|(id, cm)| {
            let rows: Vec<_> =
                Diagnosis::ALL.iter().filter_map(|&d| binary_metrics(&one_vs_rest(&cm, d)).ok()).collect();
            let m = macro_average(&rows).ok()?;
            Some((
                id.to_string(),
                ReaderScore { sensitivity: m.sensitivity?, specificity: m.specificity?, accuracy: m.accuracy? },
            ))
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn grouped(study: &Study, scores: &BTreeMap<String, ReaderScore>) -> BTreeMap<GroupKey, Vec<ReaderScore>> {
    let mut g: BTreeMap<GroupKey, Vec<ReaderScore>> = BTreeMap::new();
    for (id, s) in scores {
        if let Some(p) = study.participant(id) {
            g.entry((p.tier, p.arm)).or_default().push(*s);
        }
    }
    g
}

/// Subgroup summaries, arm comparisons and the fixed-set retention series
/// for a cycle in which every participant finished the exam.
pub fn cycle_report(study: &Study, cycle: u32, exec: Exec) -> Result<CycleReport, StudyError> {
    if study.cycle(cycle).is_none() {
        return Err(StudyError::CycleNotOpen(cycle));
    }
    let missing = study.missing_exams(cycle);
    if !missing.is_empty() {
        return Err(StudyError::Incomplete { cycle, missing });
    }
    let plan = study.plan();
    let mut notes = Vec::new();
    for t in study.single_arm_tiers() {
        notes.push(format!("tier {t} was assigned to a single arm; no arm comparison"));
    }
    let mut sets = Vec::new();
    let mut pending_tests: Vec<(Tier, ExamSet, usize, usize, TestResult)> = Vec::new();
    let exam = &study.cycle(cycle).expect("checked above").exam;
    for (set, present) in [(ExamSet::Fixed, !exam.fixed.is_empty()), (ExamSet::Random, !exam.sampled.is_empty())] {
        if !present {
            continue;
        }
        let scores = reader_scores(study, cycle, set);
        let groups = grouped(study, &scores);
        let mut rows = Vec::new();
        for (&key, members) in &groups {
            let label = group_label(key);
            let ci = |f: fn(&ReaderScore) -> f64, what: &str| -> Option<(f64, f64)> {
                if members.len() < 2 {
                    return None;
                }
                let seed = plan.seed ^ stable_hash(&format!("{label}/{set:?}/{cycle}/{what}"));
                bootstrap_ci(members, |m: &[ReaderScore]| Some(mean(&m.iter().map(f).collect::<Vec<_>>())), plan.bootstrap_resamples, seed, exec)
                    .ok()
                    .map(|c| (c.lower, c.upper))
            };
            if members.len() < 2 {
                notes.push(format!("{label} has one participant on the {set:?} set; no interval"));
            }
            rows.push(SubgroupRow {
                arm: key.1,
                tier: key.0,
                participants: members.len(),
                sensitivity: mean(&members.iter().map(|m| m.sensitivity).collect::<Vec<_>>()),
                specificity: mean(&members.iter().map(|m| m.specificity).collect::<Vec<_>>()),
                accuracy: mean(&members.iter().map(|m| m.accuracy).collect::<Vec<_>>()),
                sensitivity_ci: ci(|m| m.sensitivity, "sens"),
                specificity_ci: ci(|m| m.specificity, "spec"),
                accuracy_ci: ci(|m| m.accuracy, "acc"),
                label,
            });
        }
        if study.participants().any(|p| p.arm.is_some()) {
            for tier in Tier::ALL {
                let pick = |arm| -> Vec<f64> {
                    groups.get(&(tier, Some(arm))).map(|v| v.iter().map(|m| m.sensitivity).collect()).unwrap_or_default()
                };
                let (t, a) = (pick(Arm::Traditional), pick(Arm::AiAugmented));
                if t.is_empty() && a.is_empty() {
                    continue;
                }
                match mann_whitney_u(&t, &a) {
                    Ok(test) => pending_tests.push((tier, set, t.len(), a.len(), test)),
                    Err(e) => notes.push(format!("tier {tier}, {set:?} set: arm comparison skipped ({e})")),
                }
            }
        }
        sets.push(SetReport { set, rows });
    }
    let ps: Vec<f64> = pending_tests.iter().map(|t| t.4.p_value).collect();
    let adjusted = sidak(&ps, ps.len()).map_err(|e| StudyError::State(e.to_string()))?;
    let comparisons = pending_tests
        .into_iter()
        .zip(adjusted)
        .map(|((tier, set, n_traditional, n_ai, test), p_adjusted)| ArmComparison {
            tier,
            set,
            n_traditional,
            n_ai,
            test,
            p_adjusted,
        })
        .collect();

    let mut retention = Vec::new();
    for c in 1..=cycle {
        if !study.missing_exams(c).is_empty() {
            notes.push(format!("cycle {c} incomplete; left out of the retention series"));
            continue;
        }
        for (key, members) in grouped(study, &reader_scores(study, c, ExamSet::Fixed)) {
            retention.push(RetentionPoint {
                cycle: c,
                label: group_label(key),
                sensitivity: mean(&members.iter().map(|m| m.sensitivity).collect::<Vec<_>>()),
                accuracy: mean(&members.iter().map(|m| m.accuracy).collect::<Vec<_>>()),
            });
        }
    }
    Ok(CycleReport { cycle, sets, comparisons, retention, notes })
}

impl CycleReport {
    pub const COLUMNS: [&'static str; 9] = [
        "set",
        "group",
        "sensitivity",
        "sensitivity_ci",
        "specificity",
        "specificity_ci",
        "accuracy",
        "accuracy_ci",
        "p_value",
    ];

    /// Adjusted arm-comparison p-value for a tier on a set.
    pub fn p_value(&self, set: ExamSet, tier: Tier) -> Option<f64> {
        self.comparisons.iter().find(|c| c.set == set && c.tier == tier).map(|c| c.p_adjusted)
    }

    /// One table row per subgroup and set, percentages to two decimals.
    pub fn table(&self) -> Vec<[String; 9]> {
        let pct = |x: f64| format!("{:.2}", crate::metrics::pct(x));
        let ci = |c: Option<(f64, f64)>| c.map_or_else(|| "-".to_string(), |(l, u)| format!("{}-{}", pct(l), pct(u)));
        let mut out = Vec::new();
        for set in &self.sets {
            for r in &set.rows {
                out.push([
                    format!("{:?}", set.set).to_lowercase(),
                    r.label.clone(),
                    pct(r.sensitivity),
                    ci(r.sensitivity_ci),
                    pct(r.specificity),
                    ci(r.specificity_ci),
                    pct(r.accuracy),
                    ci(r.accuracy_ci),
                    self.p_value(set.set, r.tier).map_or_else(|| "-".to_string(), |p| format!("{p:.4}")),
                ]);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let rows = self.table();
        let mut widths = Self::COLUMNS.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            let padded: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut s = format!("Cycle {}\n", self.cycle);
        s += &line(Self::COLUMNS.to_vec());
        for r in &rows {
            s += &line(r.iter().map(String::as_str).collect());
        }
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["cycle"];
        header.extend(Self::COLUMNS);
        w.write_record(&header)?;
        for r in self.table() {
            let mut rec = vec![self.cycle.to_string()];
            rec.extend(r);
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn votes() {
        use Diagnosis::*;
        assert_eq!(majority_vote(&[Control, Control, Cl]), Some(Control));
        assert_eq!(majority_vote(&[Control, Cl]), Some(Cl));
        assert_eq!(majority_vote(&[Control, Clp, Cl]), Some(Clp));
        assert_eq!(majority_vote(&[Cl, Cl, Clp, Clp, Control]), Some(Clp));
        assert_eq!(majority_vote(&[]), None);
    }
}
