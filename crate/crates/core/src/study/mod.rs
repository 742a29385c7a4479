//! Blinded reader-study and training-cycle orchestration.
//!
//! All state changes go through [`Study`] commands, each of which appends
//! one [`Event`] to an ordered log; replaying the log rebuilds the state.

mod assist;
pub mod clock;
mod engine;
mod log;
mod plan;
mod pool;
mod report;

pub use assist::{assist_payload, AssistImage, AssistPayload, AssistStructure, StructureStatus};
pub use clock::{Clock, ManualClock, SystemClock};
pub use engine::{
    CasePayload, CycleState, DiagnosisEvent, Event, ImagePayload, NextCase, Session, SessionInfo, SessionStatus, Study,
    SubmitAck,
};
pub use log::{EventStore, LoggedEvent, Snapshot, LOG_FILE, SNAPSHOT_FILE};
pub use plan::{
    compose_exam, presentation_order, randomize_groups, ExamList, ModelConfig, Randomization, StudyPlan, TrainingPlan,
    PLAN_VERSION,
};
pub use pool::{PoolCase, Pools};
pub use report::{
    cycle_report, majority_vote, ArmComparison, CycleReport, ReaderScore, RetentionPoint, SetReport, SubgroupRow,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Diagnosis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudyError {
    #[error("plan: {0}")]
    Plan(String),
    #[error("not enough {class} cases: need {needed}, pool has {available}")]
    InsufficientPool { class: Diagnosis, needed: usize, available: usize },
    #[error("tier {tier} has {count} participant(s); assigning it to a single arm needs an explicit override")]
    TierTooSmall { tier: Tier, count: usize },
    #[error("unknown participant {0}")]
    UnknownParticipant(String),
    #[error("participant {0} already enrolled")]
    AlreadyEnrolled(String),
    #[error("unknown session")]
    UnknownSession,
    #[error("session is held by another client")]
    SessionBusy,
    #[error("session closed: time limit exceeded")]
    SessionExpired,
    #[error("case {0} was not served in this session")]
    NotServed(String),
    #[error("case {0} already answered")]
    AlreadyAnswered(String),
    #[error("cycle {0} is not open")]
    CycleNotOpen(u32),
    #[error("cycle {cycle} cannot open before {not_before_ms} (washout)")]
    Washout { cycle: u32, not_before_ms: i64 },
    #[error("invalid state: {0}")]
    State(String),
    #[error("cycle {cycle} incomplete; missing participants: {missing:?}")]
    Incomplete { cycle: u32, missing: Vec<String> },
    #[error("event log: {0}")]
    Log(String),
}

/// Experience level; fixed at enrollment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// 0-1 years.
    Trainee,
    /// 1-3 years.
    Junior,
    /// Over 10 years.
    Senior,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Trainee, Tier::Junior, Tier::Senior];

    /// Subgroup number used in group labels.
    pub fn number(self) -> u8 {
        match self {
            Tier::Trainee => 1,
            Tier::Junior => 2,
            Tier::Senior => 3,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Trainee => "trainee",
            Tier::Junior => "junior",
            Tier::Senior => "senior",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "T-TG")]
    Traditional,
    #[serde(rename = "AI-TG")]
    AiAugmented,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Traditional, Arm::AiAugmented];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Traditional => "T-TG",
            Arm::AiAugmented => "AI-TG",
        }
    }
}

/// Label such as `T-TG-1` (traditional arm, trainees).
pub fn subgroup_label(arm: Arm, tier: Tier) -> String {
    format!("{}-{}", arm.as_str(), tier.number())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    /// Opaque coded identifier.
    pub id: String,
    pub tier: Tier,
    pub arm: Option<Arm>,
}

impl Participant {
    pub fn new(id: impl Into<String>, tier: Tier) -> Self {
        Self { id: id.into(), tier, arm: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Exam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamSet {
    /// Same cases every cycle.
    Fixed,
    /// Fresh cases every cycle.
    Random,
    Training,
}

/// Who sees the assistant during a phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistPolicy {
    Never,
    AiArm,
    Always,
    Tiers(Vec<Tier>),
}

impl AssistPolicy {
    pub fn applies(&self, p: &Participant) -> bool {
        match self {
            AssistPolicy::Never => false,
            AssistPolicy::AiArm => p.arm == Some(Arm::AiAugmented),
            AssistPolicy::Always => true,
            AssistPolicy::Tiers(t) => t.contains(&p.tier),
        }
    }

    pub fn uses_arms(&self) -> bool {
        matches!(self, AssistPolicy::AiArm)
    }
}

/// Keys that must never appear in a served case payload: ground truth,
/// answers and group membership.
pub const BLINDED_KEYS: &[&str] =
    &["truth", "reference", "diagnosis", "answers", "participant", "arm", "tier", "group", "subgroup"];

/// JSON paths in `payload` that break blinding: any [`BLINDED_KEYS`] key,
/// or a string value naming an arm.
pub fn blinding_leaks(payload: &serde_json::Value) -> Vec<String> {
    fn walk(v: &serde_json::Value, path: &mut String, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let len = path.len();
                    path.push('.');
                    path.push_str(k);
                    if BLINDED_KEYS.contains(&k.as_str()) {
                        out.push(path.clone());
                    }
                    walk(child, path, out);
                    path.truncate(len);
                }
            }
            serde_json::Value::Array(items) => {
                for (i, child) in items.iter().enumerate() {
                    let len = path.len();
                    path.push_str(&format!("[{i}]"));
                    walk(child, path, out);
                    path.truncate(len);
                }
            }
            serde_json::Value::String(s) => {
                if [Arm::Traditional, Arm::AiAugmented].iter().any(|a| s.contains(a.as_str())) {
                    out.push(path.clone());
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(payload, &mut String::from("$"), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn blinding_scan_finds_nested_keys_and_arm_labels() {
        let clean = json!({"case_id": "C1", "images": [{"image_id": "C1-0", "rendering": "<svg/>"}]});
        assert!(blinding_leaks(&clean).is_empty());
        let dirty = json!({"case_id": "C1", "images": [{"meta": {"truth": "CLP"}}], "note": "AI-TG"});
        assert_eq!(blinding_leaks(&dirty), vec!["$.images[0].meta.truth".to_string(), "$.note".to_string()]);
    }
}
