use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{Arm, AssistPolicy, Participant, StudyError, Tier};
use crate::exec::{stable_hash, stream_rng};
use crate::fusion::{Diagnosis, FusionConfig};
use crate::inference::NoiseConfig;
use crate::synth::{ClassCounts, CohortConfig};

pub const PLAN_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    /// Novel training cases per cycle.
    pub cases: ClassCounts,
    pub assist: AssistPolicy,
}

/// The simulated model behind assist payloads.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub noise: NoiseConfig,
    pub fusion: FusionConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub version: String,
    pub name: String,
    pub seed: u64,
    pub cycles: u32,
    pub washout_days: u32,
    pub time_limit_seconds: u64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Exam cases identical in every cycle.
    pub fixed: ClassCounts,
    /// Exam cases drawn fresh each cycle.
    #[serde(default)]
    pub random: ClassCounts,
    /// Assistant visibility during exams, one entry per cycle; empty means
    /// never.
    #[serde(default)]
    pub exam_assist: Vec<AssistPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingPlan>,
    pub exam_pool: CohortConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_pool: Option<CohortConfig>,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_resamples() -> usize {
    1000
}

impl StudyPlan {
    /// Four training-and-exam cycles two weeks apart: 20 training cases
    /// (15:1:4 Control:CL:CLP), then 200 fixed (125:6:69) and 100 random
    /// (72:3:25) exam cases in a 3-hour session.
    pub fn training_pilot(seed: u64) -> Self {
        let mut training_pool = CohortConfig::new(ClassCounts::new(495, 21, 70), seed ^ 0x7a1);
        training_pool.id_prefix = "T".into();
        Self {
            version: PLAN_VERSION.into(),
            name: "training-pilot".into(),
            seed,
            cycles: 4,
            washout_days: 14,
            time_limit_seconds: 3 * 3600,
            bootstrap_resamples: default_resamples(),
            fixed: ClassCounts::new(125, 6, 69),
            random: ClassCounts::new(72, 3, 25),
            exam_assist: Vec::new(),
            training: Some(TrainingPlan { cases: ClassCounts::new(15, 1, 4), assist: AssistPolicy::AiArm }),
            exam_pool: CohortConfig::oc_gt3000(seed ^ 0xe8a3),
            training_pool: Some(training_pool),
            model: ModelConfig { noise: NoiseConfig::realistic(), fusion: FusionConfig::default(), seed },
        }
    }

    /// One 1030-case session (888:22:120) read unassisted, then again with
    /// the assistant shown to juniors after the washout. The pool holds 22
    /// CL cases so the session composition can be met.
    pub fn reader_study(seed: u64) -> Self {
        Self {
            exam_pool: CohortConfig::new(ClassCounts::new(2980, 22, 170), seed ^ 0xe8a3),
            name: "reader-study".into(),
            cycles: 2,
            time_limit_seconds: 24 * 3600,
            fixed: ClassCounts::new(888, 22, 120),
            random: ClassCounts::default(),
            exam_assist: vec![AssistPolicy::Never, AssistPolicy::Tiers(vec![Tier::Junior])],
            training: None,
            training_pool: None,
            ..Self::training_pilot(seed)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, StudyError> {
        let plan: Self = toml::from_str(text).map_err(|e| StudyError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes to TOML")
    }

    pub fn exam_assist_for(&self, cycle: u32) -> AssistPolicy {
        self.exam_assist.get(cycle as usize - 1).cloned().unwrap_or(AssistPolicy::Never)
    }

    /// Whether any phase depends on arm assignment.
    pub fn uses_arms(&self) -> bool {
        self.exam_assist.iter().any(AssistPolicy::uses_arms)
            || self.training.as_ref().is_some_and(|t| t.assist.uses_arms())
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::Plan(m));
        if self.version.split('.').next() != PLAN_VERSION.split('.').next() {
            return bad(format!("unsupported plan version {}", self.version));
        }
        if self.cycles == 0 {
            return bad("at least one cycle is required".into());
        }
        if !self.exam_assist.is_empty() && self.exam_assist.len() != self.cycles as usize {
            return bad(format!("exam_assist has {} entries for {} cycles", self.exam_assist.len(), self.cycles));
        }
        if self.fixed.total() + self.random.total() == 0 {
            return bad("exam has no cases".into());
        }
        if self.time_limit_seconds == 0 {
            return bad("time limit must be positive".into());
        }
        if self.bootstrap_resamples < 100 {
            return bad("bootstrap_resamples must be at least 100".into());
        }
        for d in Diagnosis::ALL {
            let need = self.fixed.get(d) + self.cycles as usize * self.random.get(d);
            let have = self.exam_pool.counts.get(d);
            if need > have {
                return Err(StudyError::InsufficientPool { class: d, needed: need, available: have });
            }
        }
        match (&self.training, &self.training_pool) {
            (Some(t), Some(pool)) => {
                if pool.id_prefix == self.exam_pool.id_prefix {
                    return bad("training and exam pools need distinct id prefixes".into());
                }
                for d in Diagnosis::ALL {
                    let need = self.cycles as usize * t.cases.get(d);
                    if need > pool.counts.get(d) {
                        return Err(StudyError::InsufficientPool {
                            class: d,
                            needed: need,
                            available: pool.counts.get(d),
                        });
                    }
                }
            }
            (Some(_), None) => return bad("training phase configured without a training pool".into()),
            _ => {}
        }
        self.model.fusion.validate().map_err(|e| StudyError::Plan(e.to_string()))?;
        self.model.noise.validate().map_err(|e| StudyError::Plan(e.to_string()))?;
        Ok(())
    }
}

/// Case ids of one exam: verbatim fixed ids plus the sampled portion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamList {
    pub fixed: Vec<String>,
    pub sampled: Vec<String>,
}

impl ExamList {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.fixed.iter().chain(&self.sampled)
    }

    pub fn len(&self) -> usize {
        self.fixed.len() + self.sampled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples `composition` without replacement from `pool` (`(case id, class)`
/// pairs), skipping `fixed_ids` and `exclude`. The result lists ids in pool
/// order; presentation order is chosen per reader by [`presentation_order`].
pub fn compose_exam(
    pool: &[(String, Diagnosis)],
    composition: &ClassCounts,
    fixed_ids: &[String],
    exclude: &BTreeSet<String>,
    seed: u64,
) -> Result<ExamList, StudyError> {
    let fixed_set: BTreeSet<&String> = fixed_ids.iter().collect();
    let mut chosen = BTreeSet::new();
    for d in Diagnosis::ALL {
        let need = composition.get(d);
        let mut candidates: Vec<&String> = pool
            .iter()
            .filter(|(id, c)| *c == d && !fixed_set.contains(id) && !exclude.contains(id))
            .map(|(id, _)| id)
            .collect();
        if candidates.len() < need {
            return Err(StudyError::InsufficientPool { class: d, needed: need, available: candidates.len() });
        }
        candidates.shuffle(&mut stream_rng(seed, &[0xc0, d.index() as u64]));
        chosen.extend(candidates.into_iter().take(need).cloned());
    }
    let sampled = pool.iter().filter(|(id, _)| chosen.contains(id)).map(|(id, _)| id.clone()).collect();
    Ok(ExamList { fixed: fixed_ids.to_vec(), sampled })
}

/// Reader-specific shuffle of an exam.
pub fn presentation_order(case_ids: &[String], seed: u64, reader: &str, key: u64) -> Vec<String> {
    let mut order = case_ids.to_vec();
    order.shuffle(&mut stream_rng(seed, &[stable_hash(reader), key]));
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Randomization {
    pub assignments: BTreeMap<String, Arm>,
    /// Tiers that went wholly to one arm.
    pub single_arm_tiers: Vec<Tier>,
}

/// Stratified allocation: within each tier the participants are shuffled
/// and dealt alternately to the two arms, so arm sizes differ by at most
/// one. A tier with a single participant is refused unless
/// `allow_single_arm` is set.
pub fn randomize_groups(
    participants: &[Participant],
    seed: u64,
    allow_single_arm: bool,
) -> Result<Randomization, StudyError> {
    let mut by_tier: BTreeMap<Tier, Vec<&str>> = BTreeMap::new();
    for p in participants {
        by_tier.entry(p.tier).or_default().push(&p.id);
    }
    let mut out = Randomization { assignments: BTreeMap::new(), single_arm_tiers: Vec::new() };
    for (tier, mut ids) in by_tier {
        ids.sort_unstable();
        let mut rng = stream_rng(seed, &[0x5a, tier.number() as u64]);
        if ids.len() < 2 {
            if !allow_single_arm {
                return Err(StudyError::TierTooSmall { tier, count: ids.len() });
            }
            let arm = *Arm::ALL.choose(&mut rng).expect("two arms");
            out.assignments.extend(ids.iter().map(|id| (id.to_string(), arm)));
            out.single_arm_tiers.push(tier);
            continue;
        }
        ids.shuffle(&mut rng);
        // Which arm gets the extra member of an odd tier is also random.
        let first = *Arm::ALL.choose(&mut rng).expect("two arms");
        let second = if first == Arm::Traditional { Arm::AiAugmented } else { Arm::Traditional };
        for (i, id) in ids.into_iter().enumerate() {
            out.assignments.insert(id.to_string(), if i % 2 == 0 { first } else { second });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(counts: ClassCounts) -> Vec<(String, Diagnosis)> {
        let mut v = Vec::new();
        for d in Diagnosis::ALL {
            for i in 0..counts.get(d) {
                v.push((format!("{}{i:05}", d.as_str()), d));
            }
        }
        v.sort();
        v
    }

    fn composition_of(list: &[String], pool: &[(String, Diagnosis)]) -> ClassCounts {
        let m: BTreeMap<_, _> = pool.iter().cloned().collect();
        let mut c = ClassCounts::default();
        for id in list {
            match m[id] {
                Diagnosis::Control => c.control += 1,
                Diagnosis::Cl => c.cl += 1,
                Diagnosis::Clp => c.clp += 1,
            }
        }
        c
    }

    #[test]
    fn exact_compositions() {
        let p = pool(ClassCounts::new(2980, 22, 170));
        for want in [ClassCounts::new(125, 6, 69), ClassCounts::new(72, 3, 25), ClassCounts::new(888, 22, 120)] {
            let e = compose_exam(&p, &want, &[], &BTreeSet::new(), 3).unwrap();
            assert_eq!(composition_of(&e.sampled, &p), want);
        }
    }

    #[test]
    fn fixed_ids_kept_and_excluded_from_sampling() {
        let p = pool(ClassCounts::new(50, 5, 10));
        let fixed: Vec<String> = p.iter().step_by(9).map(|x| x.0.clone()).collect();
        let e = compose_exam(&p, &ClassCounts::new(40, 1, 3), &fixed, &BTreeSet::new(), 1).unwrap();
        assert_eq!(e.fixed, fixed);
        assert!(e.sampled.iter().all(|id| !fixed.contains(id)));
        assert_eq!(e.len(), fixed.len() + 44);
    }

    #[test]
    fn insufficient_pool_names_class() {
        let p = pool(ClassCounts::new(50, 2, 10));
        let err = compose_exam(&p, &ClassCounts::new(10, 3, 1), &[], &BTreeSet::new(), 1).unwrap_err();
        assert_eq!(err, StudyError::InsufficientPool { class: Diagnosis::Cl, needed: 3, available: 2 });
    }

    #[test]
    fn presentation_differs_per_reader() {
        let ids: Vec<String> = (0..50).map(|i| format!("c{i}")).collect();
        let a = presentation_order(&ids, 1, "P01", 0);
        let b = presentation_order(&ids, 1, "P02", 0);
        assert_ne!(a, b);
        assert_eq!(a, presentation_order(&ids, 1, "P01", 0));
    }

    #[test]
    fn stratified_halves() {
        let mut ps: Vec<Participant> = (0..12).map(|i| Participant::new(format!("A{i:02}"), Tier::Trainee)).collect();
        ps.extend((0..12).map(|i| Participant::new(format!("B{i:02}"), Tier::Junior)));
        let r = randomize_groups(&ps, 8, false).unwrap();
        for tier in [Tier::Trainee, Tier::Junior] {
            for arm in Arm::ALL {
                let n = ps.iter().filter(|p| p.tier == tier && r.assignments[&p.id] == arm).count();
                assert_eq!(n, 6);
            }
        }
        assert_eq!(r, randomize_groups(&ps, 8, false).unwrap());
    }

    #[test]
    fn single_participant_needs_override() {
        let ps = [Participant::new("X", Tier::Senior)];
        assert!(matches!(randomize_groups(&ps, 0, false), Err(StudyError::TierTooSmall { .. })));
        let r = randomize_groups(&ps, 0, true).unwrap();
        assert_eq!(r.single_arm_tiers, vec![Tier::Senior]);
        assert_eq!(r.assignments.len(), 1);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for plan in [StudyPlan::training_pilot(1), StudyPlan::reader_study(2)] {
            plan.validate().unwrap();
            let text = plan.to_toml();
            assert_eq!(StudyPlan::from_toml(&text).unwrap(), plan);
        }
        assert_eq!(StudyPlan::reader_study(0).fixed.total(), 1030);
    }

    #[test]
    fn plan_errors() {
        let mut p = StudyPlan::training_pilot(1);
        p.version = "2.0".into();
        assert!(p.validate().is_err());
        let mut p = StudyPlan::training_pilot(1);
        p.random = ClassCounts::new(72, 5, 25);
        assert!(matches!(p.validate(), Err(StudyError::InsufficientPool { class: Diagnosis::Cl, .. })));
        let err = StudyPlan::from_toml("version = \"1.0\"\ncycles = ").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }
}
