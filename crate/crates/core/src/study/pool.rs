use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, StudyError, StudyPlan};
use crate::exec::Exec;
use crate::fusion::{diagnose_case, CaseFindings, Diagnosis, DiagnosisResult};
use crate::inference::{predict_image, ImageDescriptor, SimulatedPredictor};
use crate::synth::{generate_cohort_with, CohortConfig};

/// A study case with its annotation, the model's per-image findings and the
/// fused model diagnosis, if fusion produced one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCase {
    pub case_id: String,
    pub truth: Diagnosis,
    pub gestational_week: u8,
    pub annotated: CaseFindings,
    pub predicted: CaseFindings,
    pub model: Option<DiagnosisResult>,
}

/// Exam and training pools, regenerated deterministically from the plan.
#[derive(Debug, Clone)]
pub struct Pools {
    pub exam: Vec<PoolCase>,
    pub training: Vec<PoolCase>,
    index: BTreeMap<String, (bool, usize)>,
    digest: String,
    source: (CohortConfig, Option<CohortConfig>, ModelConfig),
}

fn build(cfg: &CohortConfig, plan: &StudyPlan, exec: Exec) -> Result<Vec<PoolCase>, StudyError> {
    let cohort = generate_cohort_with(cfg, exec).map_err(|e| StudyError::Plan(e.to_string()))?;
    let predictor =
        SimulatedPredictor::new(plan.model.noise.clone(), plan.model.seed).map_err(|e| StudyError::Plan(e.to_string()))?;
    exec.map_slice(&cohort, |c| {
        let f = &c.findings;
        let images = f
            .images
            .iter()
            .map(|img| predict_image(&ImageDescriptor::from(img), &predictor))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| StudyError::Plan(e.to_string()))?;
        let predicted = CaseFindings { case_id: f.case_id.clone(), gestational_week: f.gestational_week, images };
        let model = diagnose_case(&predicted, &plan.model.fusion).ok();
        Ok(PoolCase {
            case_id: f.case_id.clone(),
            truth: c.truth,
            gestational_week: f.gestational_week,
            annotated: f.clone(),
            predicted,
            model,
        })
    })
    .into_iter()
    .collect()
}

impl Pools {
    pub fn generate(plan: &StudyPlan, exec: Exec) -> Result<Self, StudyError> {
        let exam = build(&plan.exam_pool, plan, exec)?;
        let training = match (&plan.training, &plan.training_pool) {
            (Some(_), Some(cfg)) => build(cfg, plan, exec)?,
            _ => Vec::new(),
        };
        let mut index = BTreeMap::new();
        for (i, c) in exam.iter().enumerate() {
            index.insert(c.case_id.clone(), (false, i));
        }
        for (i, c) in training.iter().enumerate() {
            if index.insert(c.case_id.clone(), (true, i)).is_some() {
                return Err(StudyError::Plan(format!("case id {} occurs in both pools", c.case_id)));
            }
        }
        let mut h = Sha256::new();
        for c in exam.iter().chain(&training) {
            h.update(serde_json::to_vec(c).expect("pool case serializes"));
            h.update(b"\n");
        }
        Ok(Self { exam, training, index, digest: hex::encode(h.finalize()), source: Self::source_of(plan) })
    }

    fn source_of(plan: &StudyPlan) -> (CohortConfig, Option<CohortConfig>, ModelConfig) {
        let training = plan.training.as_ref().and(plan.training_pool.clone());
        (plan.exam_pool.clone(), training, plan.model.clone())
    }

    /// Whether these pools are what [`Pools::generate`] gives for `plan`.
    pub fn matches(&self, plan: &StudyPlan) -> bool {
        self.source == Self::source_of(plan)
    }

    pub fn get(&self, case_id: &str) -> Option<&PoolCase> {
        self.index.get(case_id).map(|&(training, i)| if training { &self.training[i] } else { &self.exam[i] })
    }

    /// SHA-256 over the serialized pools; recorded at creation and checked
    /// on replay.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn labels(cases: &[PoolCase]) -> Vec<(String, Diagnosis)> {
        cases.iter().map(|c| (c.case_id.clone(), c.truth)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ClassCounts;

    #[test]
    fn deterministic_and_digest_sensitive() {
        let mut plan = StudyPlan::training_pilot(4);
        plan.exam_pool.counts = ClassCounts::new(40, 4, 10);
        plan.fixed = ClassCounts::new(10, 1, 2);
        plan.random = ClassCounts::new(5, 0, 2);
        plan.training_pool.as_mut().unwrap().counts = ClassCounts::new(60, 4, 16);
        let a = Pools::generate(&plan, Exec::Parallel).unwrap();
        let b = Pools::generate(&plan, Exec::Sequential).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.exam.len(), 54);
        assert_eq!(a.get("T00001").unwrap().case_id, "T00001");
        plan.model.seed += 1;
        assert_ne!(Pools::generate(&plan, Exec::Parallel).unwrap().digest(), a.digest());
    }
}
