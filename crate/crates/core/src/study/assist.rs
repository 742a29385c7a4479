use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fusion::{classify_view, Diagnosis, EvidenceTable, Flag, FusionConfig};
use crate::geometry::{encode, BoxEncoding};
use crate::inference::{StructureLabel, ViewLabel};

use super::PoolCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureStatus {
    Normal,
    Abnormal,
}

impl StructureStatus {
    pub fn color(self) -> &'static str {
        match self {
            StructureStatus::Normal => "green",
            StructureStatus::Abnormal => "red",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistStructure {
    pub structure: StructureLabel,
    pub status: StructureStatus,
    pub status_color: String,
    /// Per-structure overlay color.
    pub color: String,
    #[serde(rename = "box")]
    pub rect: BoxEncoding,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistImage {
    pub image_id: String,
    /// `None` when no view reached the acceptance threshold.
    pub view: Option<ViewLabel>,
    pub view_confidence: f64,
    pub structures: Vec<AssistStructure>,
}

/// What the assistant shows for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistPayload {
    pub case_id: String,
    pub recommendation: Diagnosis,
    pub flags: BTreeSet<Flag>,
    pub evidence: EvidenceTable,
    pub images: Vec<AssistImage>,
}

impl AssistPayload {
    /// Hex SHA-256 of the JSON encoding; logged with each assisted answer.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("payload serializes")))
    }
}

/// `None` when the case has no model result.
pub fn assist_payload(case: &PoolCase, cfg: &FusionConfig) -> Option<AssistPayload> {
    let model = case.model.as_ref()?;
    let images = case
        .predicted
        .images
        .iter()
        .map(|img| {
            let top = img.top_view();
            AssistImage {
                image_id: img.image_id.clone(),
                view: classify_view(img, cfg),
                view_confidence: img.view_prob(top),
                structures: img
                    .detections
                    .iter()
                    .filter(|d| d.confidence >= cfg.tau_det)
                    .map(|d| {
                        let status =
                            if d.label.is_abnormal() { StructureStatus::Abnormal } else { StructureStatus::Normal };
                        AssistStructure {
                            structure: d.label,
                            status,
                            status_color: status.color().into(),
                            color: d.label.color().into(),
                            rect: encode(&d.rect),
                            confidence: d.confidence,
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    Some(AssistPayload {
        case_id: case.case_id.clone(),
        recommendation: model.label,
        flags: model.flags.clone(),
        evidence: model.evidence,
        images,
    })
}
