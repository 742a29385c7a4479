//! End-to-end seeded experiments: cohort → simulated model → fusion →
//! simulated readers → metrics, and the training pilot driven through the
//! study engine.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{stable_hash, Exec};
use crate::fusion::{diagnose_batch, CaseFindings, Diagnosis, FusionConfig, FusionError};
use crate::inference::{predict_image, ImageDescriptor, InferenceError, NoiseConfig, SimulatedPredictor};
use crate::metrics::{
    automation_bias, evaluate, timing_report, weekly_f1_sd, AssistEvent, AutomationBias, EvaluateOptions,
    pct, MetricReport, MetricsError, TimingReport, WeeklyReport,
};
use crate::stats::{chi_square_test, welch_t, Contingency, StatsError, TestResult};
use crate::study::clock::{ManualClock, DAY};
use crate::study::{
    cycle_report, majority_vote, Arm, CycleReport, EventStore, NextCase, Phase, Pools, Study, StudyError, StudyPlan,
    Tier,
};
use crate::synth::{
    generate_cohort_with, profile_from_rates, simulate_reader, CohortCase, CohortConfig, ReaderProfile, SynthError,
    TimeDistribution,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("configuration: {0}")]
    Config(String),
}

/// Per-class sensitivity of a simulated trainee as a function of the cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub start: f64,
    pub gain_per_cycle: f64,
    pub cap: f64,
}

impl LearningCurve {
    pub fn flat(level: f64) -> Self {
        Self { start: level, gain_per_cycle: 0.0, cap: level }
    }

    pub fn at(&self, cycle: u32) -> f64 {
        (self.start + self.gain_per_cycle * cycle.saturating_sub(1) as f64).min(self.cap).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub tier: Tier,
    pub count: usize,
    /// Curve for each arm; participants without an arm use the first.
    pub traditional: LearningCurve,
    pub ai: LearningCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub plan: StudyPlan,
    pub participants: Vec<CohortSpec>,
    pub time: TimeDistribution,
    /// Error-rate factor when a correct recommendation is shown in training.
    pub assist_effect: f64,
    /// Permit tiers of one participant, assigned to a single arm.
    pub allow_single_arm: bool,
}

impl PilotConfig {
    /// 12 trainees and 12 juniors over four cycles; the AI arm learns about
    /// twice as fast.
    pub fn default_pilot(seed: u64) -> Self {
        Self {
            plan: StudyPlan::training_pilot(seed),
            participants: vec![
                CohortSpec {
                    tier: Tier::Trainee,
                    count: 12,
                    traditional: LearningCurve { start: 0.62, gain_per_cycle: 0.04, cap: 0.95 },
                    ai: LearningCurve { start: 0.62, gain_per_cycle: 0.08, cap: 0.95 },
                },
                CohortSpec {
                    tier: Tier::Junior,
                    count: 12,
                    traditional: LearningCurve { start: 0.75, gain_per_cycle: 0.03, cap: 0.97 },
                    ai: LearningCurve { start: 0.75, gain_per_cycle: 0.05, cap: 0.97 },
                },
            ],
            time: TimeDistribution { mean_seconds: 15.0, cv: 0.5 },
            assist_effect: 0.5,
            allow_single_arm: false,
        }
    }

    fn spec(&self, tier: Tier) -> Option<&CohortSpec> {
        self.participants.iter().find(|s| s.tier == tier)
    }
}

pub struct PilotOutcome {
    pub study: Study,
    pub reports: Vec<CycleReport>,
}

/// Simulation start: 2024-01-01T00:00:00Z.
pub const SIMULATION_EPOCH_MS: i64 = 1_704_067_200_000;

pub fn run_pilot(cfg: &PilotConfig, exec: Exec) -> Result<PilotOutcome, PipelineError> {
    let pools = Arc::new(Pools::generate(&cfg.plan, exec)?);
    run_pilot_with_pools(cfg, pools, exec)
}

/// Enrolls, randomizes and runs every cycle with simulated readers, each
/// served and answered through the engine on a simulated clock.
pub fn run_pilot_with_pools(cfg: &PilotConfig, pools: Arc<Pools>, exec: Exec) -> Result<PilotOutcome, PipelineError> {
    let plan = &cfg.plan;
    let clock = Arc::new(ManualClock::new(SIMULATION_EPOCH_MS));
    let mut study = Study::create_with_pools(plan.clone(), pools, EventStore::in_memory(), clock.clone())?;
    let mut n = 0;
    for spec in &cfg.participants {
        for _ in 0..spec.count {
            n += 1;
            study.enroll(&format!("P{n:03}"), spec.tier)?;
        }
    }
    study.randomize(cfg.allow_single_arm)?;
    let ids: Vec<String> = study.participants().map(|p| p.id.clone()).collect();
    let mut reports = Vec::new();
    for cycle in 1..=plan.cycles {
        if cycle > 1 {
            clock.advance(plan.washout_days as i64 * DAY);
        }
        study.open_cycle(cycle)?;
        for id in &ids {
            let p = study.participant(id).expect("enrolled").clone();
            let spec = cfg.spec(p.tier).ok_or_else(|| PipelineError::Config(format!("no curve for tier {}", p.tier)))?;
            let curve = if p.arm == Some(Arm::AiAugmented) { spec.ai } else { spec.traditional };
            let level = curve.at(cycle);
            let mut profile = profile_from_rates(id, [level; 3], cfg.time)?;
            profile.assist_effect = cfg.assist_effect;
            let phases: &[Phase] = if plan.training.is_some() { &[Phase::Training, Phase::Exam] } else { &[Phase::Exam] };
            for &phase in phases {
                let seed = plan.seed ^ stable_hash(&format!("{id}/{cycle}/{phase:?}"));
                read_session(&mut study, &clock, &profile, id, cycle, phase, seed)?;
            }
        }
        study.close_cycle(cycle)?;
        reports.push(cycle_report(&study, cycle, exec)?);
    }
    Ok(PilotOutcome { study, reports })
}

fn read_session(
    study: &mut Study,
    clock: &ManualClock,
    profile: &ReaderProfile,
    participant: &str,
    cycle: u32,
    phase: Phase,
    seed: u64,
) -> Result<(), PipelineError> {
    let client = format!("sim-{participant}");
    let info = study.start_session(participant, cycle, phase, &client)?;
    while let NextCase::Case(case) = study.next_case(&info.token, &client)? {
        let truth = study.pools().get(&case.case_id).expect("served from the pools").truth;
        let assist = case.assist.as_ref().map(|a| a.recommendation);
        let r = simulate_reader(profile, &case.case_id, truth, assist, seed);
        let ms = (r.elapsed_seconds * 1000.0).round() as i64;
        clock.advance(ms.max(1));
        study.submit(&info.token, &client, &case.case_id, r.diagnosis, Some(ms))?;
    }
    Ok(())
}

/// Share of seeded trials in which two arms of fixed reader sensitivity
/// separate at adjusted p < `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCheck {
    pub trials: usize,
    pub significant: usize,
    pub rate: f64,
    /// Largest adjusted p of each trial.
    pub p_values: Vec<f64>,
}

/// One cycle, one tier of `2 * per_arm` participants; a trial counts when
/// every adjusted arm comparison of the cycle is below `alpha`.
pub fn power_check(
    trials: usize,
    per_arm: usize,
    low: f64,
    high: f64,
    alpha: f64,
    seed: u64,
    exec: Exec,
) -> Result<PowerCheck, PipelineError> {
    let mut base = PilotConfig::default_pilot(seed);
    base.plan.cycles = 1;
    base.plan.training = None;
    base.plan.training_pool = None;
    base.plan.bootstrap_resamples = 200;
    base.participants = vec![CohortSpec {
        tier: Tier::Trainee,
        count: 2 * per_arm,
        traditional: LearningCurve::flat(low),
        ai: LearningCurve::flat(high),
    }];
    let pools = Arc::new(Pools::generate(&base.plan, exec)?);
    let p_values: Vec<f64> = exec
        .map_range(trials, |t| -> Result<f64, PipelineError> {
            let mut cfg = base.clone();
            cfg.plan.seed = seed ^ stable_hash(&format!("power-trial-{t}"));
            let out = run_pilot_with_pools(&cfg, pools.clone(), Exec::Sequential)?;
            let r = &out.reports[0];
            Ok(r.comparisons.iter().map(|c| c.p_adjusted).fold(if r.comparisons.is_empty() { 1.0 } else { 0.0 }, f64::max))
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
    let significant = p_values.iter().filter(|&&p| p < alpha).count();
    Ok(PowerCheck { trials, significant, rate: significant as f64 / trials.max(1) as f64, p_values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub noise: NoiseConfig,
    pub fusion: FusionConfig,
    pub readers: Vec<ReaderProfile>,
    /// Readers who also read every case with the assistant shown.
    pub assisted_readers: Vec<String>,
    pub n_resamples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot: Option<PilotConfig>,
}

impl SimulationConfig {
    /// Validation-cohort reader study: seniors R1-R3, juniors R4-R6 who also
    /// read with assistance, plus the four-cycle pilot.
    pub fn reader_study(seed: u64) -> Self {
        let mut readers: Vec<ReaderProfile> = (1..=3).map(|i| ReaderProfile::senior(&format!("R{i}"))).collect();
        readers.extend((4..=6).map(|i| ReaderProfile::junior(&format!("R{i}"))));
        Self {
            seed,
            cohort: CohortConfig::oc_gt3000(seed),
            noise: NoiseConfig::realistic(),
            fusion: FusionConfig::default(),
            readers,
            assisted_readers: (4..=6).map(|i| format!("R{i}")).collect(),
            n_resamples: 1000,
            pilot: Some(PilotConfig::default_pilot(seed)),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for r in &self.readers {
            r.validate()?;
        }
        for name in &self.assisted_readers {
            if !self.readers.iter().any(|r| &r.name == name) {
                return Err(PipelineError::Config(format!("assisted reader {name} is not configured")));
            }
        }
        self.fusion.validate()?;
        self.noise.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderResult {
    pub name: String,
    /// Mean of the profile's per-class sensitivities.
    pub configured_sensitivity: f64,
    /// Correct reads over all cases.
    pub pooled_sensitivity: f64,
    pub report: MetricReport,
    pub timing: TimingReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assisted: Option<AssistedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistedResult {
    pub report: MetricReport,
    pub timing: TimingReport,
    pub automation_bias: AutomationBias,
    /// Welch test of unassisted against assisted reading times.
    pub time_test: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub name: String,
    /// Pearson test of correct/incorrect counts, model against the group
    /// consensus.
    pub test: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub cases: usize,
    pub model: MetricReport,
    pub readers: Vec<ReaderResult>,
    /// Majority-vote consensus per reader group.
    pub consensus: Vec<MetricReport>,
    /// Week-bin F1 stability of the model and each consensus.
    pub weekly: Vec<(String, WeeklyReport)>,
    pub model_vs_consensus: Vec<GroupComparison>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pilot: Vec<CycleReport>,
}

impl SimulationReport {
    /// Plain-text summary: model and reader tables, assistance effects,
    /// week stability, consensus tests and the pilot cycles.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", pct(x)));
        let mut s = format!("Simulation seed {}, {} cases\n\n", self.seed, self.cases);
        s += &self.model.to_text();
        for r in &self.readers {
            s += &format!(
                "\n{}: configured sensitivity {:.2}%, pooled {:.2}%, mean {:.1} s/case\n",
                r.name,
                pct(r.configured_sensitivity),
                pct(r.pooled_sensitivity),
                r.timing.mean_seconds.unwrap_or(f64::NAN),
            );
            s += &r.report.to_text();
            if let Some(a) = &r.assisted {
                s += &format!(
                    "with assistance: mean {:.1} s/case (Welch p = {:.4}), followed wrong AI {}/{} ({}%)\n",
                    a.timing.mean_seconds.unwrap_or(f64::NAN),
                    a.time_test.p_value,
                    a.automation_bias.followed_when_incorrect,
                    a.automation_bias.ai_incorrect,
                    opt(a.automation_bias.overreliance),
                );
                s += &a.report.to_text();
            }
        }
        for c in &self.consensus {
            s += "\n";
            s += &c.to_text();
        }
        s += "\nWeek-bin F1 SD (points)\n";
        for (name, w) in &self.weekly {
            s += &format!("  {name}: {}\n", w.sd.map_or_else(|| "-".to_string(), |x| format!("{:.2}", pct(x))));
        }
        for g in &self.model_vs_consensus {
            s += &format!("Model vs {}: chi-square {:.4}, p = {:.4}\n", g.name, g.test.statistic, g.test.p_value);
        }
        for c in &self.pilot {
            s += "\n";
            s += &c.to_text();
        }
        s
    }
}

fn pooled(pairs: &[(Diagnosis, Diagnosis)]) -> f64 {
    pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len().max(1) as f64
}

/// Simulated model findings for every case, in cohort order.
pub fn predict_cohort(
    cohort: &[CohortCase],
    noise: &NoiseConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<CaseFindings>, InferenceError> {
    let predictor = SimulatedPredictor::new(noise.clone(), seed)?;
    exec.map_slice(cohort, |c| {
        let images = c
            .findings
            .images
            .iter()
            .map(|img| predict_image(&ImageDescriptor::from(img), &predictor))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CaseFindings { images, ..c.findings.clone() })
    })
    .into_iter()
    .collect()
}

pub fn run_simulation(cfg: &SimulationConfig, exec: Exec) -> Result<SimulationReport, PipelineError> {
    cfg.validate()?;
    let cohort = generate_cohort_with(&cfg.cohort, exec)?;
    let predicted = predict_cohort(&cohort, &cfg.noise, cfg.seed, exec)?;
    let results = diagnose_batch(&predicted, &cfg.fusion, exec)?;
    let opts = |salt: &str| EvaluateOptions { n_resamples: cfg.n_resamples, seed: cfg.seed ^ stable_hash(salt), exec };
    let model_items: Vec<_> = cohort.iter().zip(&results).map(|(c, r)| (c.truth, r.label, Some(r.scores))).collect();
    let model = evaluate("Model", &model_items, &opts("model"))?;

    let mut readers = Vec::new();
    let mut reads: Vec<(String, Vec<Diagnosis>)> = Vec::new();
    for profile in &cfg.readers {
        let seed = cfg.seed ^ stable_hash(&profile.name);
        let responses = exec.map_slice(&cohort, |c| simulate_reader(profile, c.case_id(), c.truth, None, seed));
        let pairs: Vec<(Diagnosis, Diagnosis)> = cohort.iter().zip(&responses).map(|(c, r)| (c.truth, r.diagnosis)).collect();
        let items: Vec<_> = pairs.iter().map(|&(t, p)| (t, p, None)).collect();
        let report = evaluate(&profile.name, &items, &opts(&profile.name))?;
        let times: Vec<f64> = responses.iter().map(|r| r.elapsed_seconds).collect();
        let timing = timing_report(&times, cohort.len())?;
        let assisted = if cfg.assisted_readers.contains(&profile.name) {
            let aseed = seed ^ stable_hash("assisted");
            let aresp = exec.map_slice(&(0..cohort.len()).collect::<Vec<_>>(), |&i| {
                simulate_reader(profile, cohort[i].case_id(), cohort[i].truth, Some(results[i].label), aseed)
            });
            let aitems: Vec<_> = cohort.iter().zip(&aresp).map(|(c, r)| (c.truth, r.diagnosis, None)).collect();
            let events: Vec<AssistEvent> = cohort
                .iter()
                .zip(&results)
                .zip(&aresp)
                .map(|((c, m), r)| AssistEvent {
                    case_id: c.case_id().to_string(),
                    ai_correct: m.label == c.truth,
                    reader_followed_ai: r.diagnosis == m.label,
                    reader_correct: r.diagnosis == c.truth,
                })
                .collect();
            let atimes: Vec<f64> = aresp.iter().map(|r| r.elapsed_seconds).collect();
            Some(AssistedResult {
                report: evaluate(&format!("{} + assist", profile.name), &aitems, &opts(&format!("{}+", profile.name)))?,
                timing: timing_report(&atimes, cohort.len())?,
                automation_bias: automation_bias(&events)?,
                time_test: welch_t(&times, &atimes)?,
            })
        } else {
            None
        };
        readers.push(ReaderResult {
            name: profile.name.clone(),
            configured_sensitivity: Diagnosis::ALL.iter().map(|&d| profile.sensitivity(d)).sum::<f64>() / 3.0,
            pooled_sensitivity: pooled(&pairs),
            report,
            timing,
            assisted,
        });
        reads.push((profile.name.clone(), responses.iter().map(|r| r.diagnosis).collect()));
    }

    // Groups of readers sharing a calibration, in configuration order.
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, p) in cfg.readers.iter().enumerate() {
        let key = format!("{:?}|{:?}", p.confusion, p.time);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    let mut consensus = Vec::new();
    let mut weekly = vec![(
        "Model".to_string(),
        weekly_f1_sd(&cohort.iter().zip(&results).map(|(c, r)| (c.findings.gestational_week, c.truth, r.label)).collect::<Vec<_>>()),
    )];
    let mut model_vs_consensus = Vec::new();
    let model_correct = model_items.iter().filter(|i| i.0 == i.1).count() as u64;
    for (_, members) in groups.iter().filter(|g| g.1.len() > 1) {
        let name = members.iter().map(|&i| cfg.readers[i].name.as_str()).collect::<Vec<_>>().join("+");
        let votes: Vec<Diagnosis> = (0..cohort.len())
            .map(|k| majority_vote(&members.iter().map(|&i| reads[i].1[k]).collect::<Vec<_>>()).expect("non-empty group"))
            .collect();
        let items: Vec<_> = cohort.iter().zip(&votes).map(|(c, &v)| (c.truth, v, None)).collect();
        consensus.push(evaluate(&name, &items, &opts(&name))?);
        weekly.push((
            name.clone(),
            weekly_f1_sd(&cohort.iter().zip(&votes).map(|(c, &v)| (c.findings.gestational_week, c.truth, v)).collect::<Vec<_>>()),
        ));
        let correct = items.iter().filter(|i| i.0 == i.1).count() as u64;
        let n = cohort.len() as u64;
        let table = Contingency::new(vec![vec![model_correct, n - model_correct], vec![correct, n - correct]])?;
        if let Ok(test) = chi_square_test(&table) {
            model_vs_consensus.push(GroupComparison { name, test });
        }
    }

    let pilot = match &cfg.pilot {
        Some(p) => run_pilot(p, exec)?.reports,
        None => Vec::new(),
    };
    Ok(SimulationReport { seed: cfg.seed, cases: cohort.len(), model, readers, consensus, weekly, model_vs_consensus, pilot })
}
