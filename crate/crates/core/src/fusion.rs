//! Threshold rules turning a case's per-image findings into one diagnosis.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::inference::{ImageFindings, StructureLabel, ViewLabel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("case {0} has no images")]
    EmptyCase(String),
    #[error("image {image_id} belongs to case {found}, not {expected}")]
    MixedCase { image_id: String, expected: String, found: String },
    #[error("fusion configuration: {0}")]
    Config(String),
}

/// Case-level label, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    Control,
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "CLP")]
    Clp,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Control, Diagnosis::Cl, Diagnosis::Clp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_cleft(self) -> bool {
        self != Diagnosis::Control
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Control => "Control",
            Diagnosis::Cl => "CL",
            Diagnosis::Clp => "CLP",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Diagnosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Control" | "control" => Ok(Diagnosis::Control),
            "CL" | "cl" => Ok(Diagnosis::Cl),
            "CLP" | "clp" => Ok(Diagnosis::Clp),
            other => Err(format!("unknown diagnosis {other:?}")),
        }
    }
}

/// All images of one fetus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFindings {
    pub case_id: String,
    pub gestational_week: u8,
    pub images: Vec<ImageFindings>,
}

impl CaseFindings {
    pub fn new(case_id: impl Into<String>, gestational_week: u8, images: Vec<ImageFindings>) -> Result<Self, FusionError> {
        let c = Self { case_id: case_id.into(), gestational_week, images };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.images.is_empty() {
            return Err(FusionError::EmptyCase(self.case_id.clone()));
        }
        if let Some(img) = self.images.iter().find(|i| i.case_id != self.case_id) {
            return Err(FusionError::MixedCase {
                image_id: img.image_id.clone(),
                expected: self.case_id.clone(),
                found: img.case_id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub tau_view: f64,
    pub tau_det: f64,
    pub min_support: u32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { tau_view: 0.5, tau_det: 0.5, min_support: 1 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        for (name, v) in [("tau_view", self.tau_view), ("tau_det", self.tau_det)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(FusionError::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if self.min_support < 1 {
            return Err(FusionError::Config("min_support must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Cleft lip seen but no axial plane was accepted.
    PalateUnassessed,
    /// Evidence is incomplete or contradictory for the assigned label.
    LowConfidence,
    /// Neither coronal nor axial evidence reached the support threshold.
    MissingKeyView,
}

/// Accepted evidence of one case.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceTable {
    /// Images accepted per view.
    pub view_counts: [u32; 4],
    /// Detections at or above `tau_det` per structure, over all images.
    pub structure_counts: [u32; 5],
    /// `joint[v][s]`: images accepted as view `v` holding at least one
    /// detection of `s` at or above `tau_det`.
    pub joint: [[u32; 5]; 4],
}

impl EvidenceTable {
    pub fn view(&self, v: ViewLabel) -> u32 {
        self.view_counts[v.index()]
    }

    pub fn structure(&self, s: StructureLabel) -> u32 {
        self.structure_counts[s.index()]
    }

    pub fn support(&self, v: ViewLabel, s: StructureLabel) -> u32 {
        self.joint[v.index()][s.index()]
    }

    pub fn axial_views(&self) -> u32 {
        self.view(ViewLabel::Napv) + self.view(ViewLabel::Capv)
    }

    /// Adds one image's contribution.
    pub fn add_image(&mut self, image: &ImageFindings, cfg: &FusionConfig) {
        let mut present = [false; 5];
        for d in image.detections.iter().filter(|d| d.confidence >= cfg.tau_det) {
            self.structure_counts[d.label.index()] += 1;
            present[d.label.index()] = true;
        }
        if let Some(v) = classify_view(image, cfg) {
            self.view_counts[v.index()] += 1;
            for (s, p) in present.iter().enumerate() {
                if *p {
                    self.joint[v.index()][s] += 1;
                }
            }
        }
    }
}

/// Per-class scores in `[0, 1]` used for ROC analysis of the fused output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub control: f64,
    pub cl: f64,
    pub clp: f64,
}

impl ClassScores {
    pub fn get(&self, d: Diagnosis) -> f64 {
        match d {
            Diagnosis::Control => self.control,
            Diagnosis::Cl => self.cl,
            Diagnosis::Clp => self.clp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub case_id: String,
    pub label: Diagnosis,
    pub flags: BTreeSet<Flag>,
    pub evidence: EvidenceTable,
    pub scores: ClassScores,
}

/// Most probable view when its probability reaches `tau_view`; ties go to
/// the earlier label in `ViewLabel::ALL`.
pub fn classify_view(image: &ImageFindings, cfg: &FusionConfig) -> Option<ViewLabel> {
    let v = image.top_view();
    (image.view_prob(v) >= cfg.tau_view).then_some(v)
}

pub fn evidence_table(case: &CaseFindings, cfg: &FusionConfig) -> EvidenceTable {
    let mut t = EvidenceTable::default();
    for img in &case.images {
        t.add_image(img, cfg);
    }
    t
}

/// The rule set applied to an evidence table.
pub fn decide(t: &EvidenceTable, min_support: u32) -> (Diagnosis, BTreeSet<Flag>) {
    use StructureLabel as S;
    use ViewLabel as V;
    let m = min_support;
    let lip_cleft = t.support(V::Clv, S::CleftLip) >= m;
    let axial_cleft = t.support(V::Capv, S::CleftAlveolus) >= m || t.support(V::Capv, S::CleftPalate) >= m;
    let axial_normal = t.support(V::Napv, S::AlveolarRidge) >= m;
    let coronal_any = lip_cleft || t.support(V::Nlv, S::UpperLip) >= m;

    let mut flags = BTreeSet::new();
    let label = if lip_cleft && axial_cleft {
        Diagnosis::Clp
    } else if lip_cleft && axial_normal {
        Diagnosis::Cl
    } else if lip_cleft {
        if t.axial_views() == 0 {
            flags.insert(Flag::PalateUnassessed);
        } else {
            flags.insert(Flag::LowConfidence);
        }
        Diagnosis::Cl
    } else if axial_cleft {
        flags.insert(Flag::LowConfidence);
        Diagnosis::Clp
    } else {
        Diagnosis::Control
    };
    if !coronal_any && !(axial_normal || axial_cleft) {
        flags.insert(Flag::MissingKeyView);
    }
    (label, flags)
}

fn class_scores(case: &CaseFindings) -> ClassScores {
    let best = |view: ViewLabel, labels: &[StructureLabel]| {
        case.images
            .iter()
            .map(|img| {
                let conf = img
                    .detections
                    .iter()
                    .filter(|d| labels.contains(&d.label))
                    .map(|d| d.confidence)
                    .fold(0.0, f64::max);
                img.view_prob(view) * conf
            })
            .fold(0.0, f64::max)
    };
    let lip = best(ViewLabel::Clv, &[StructureLabel::CleftLip]);
    let axial = best(ViewLabel::Capv, &[StructureLabel::CleftAlveolus, StructureLabel::CleftPalate]);
    ClassScores { control: 1.0 - lip.max(axial), cl: lip * (1.0 - axial), clp: axial }
}

pub fn diagnose_case(case: &CaseFindings, cfg: &FusionConfig) -> Result<DiagnosisResult, FusionError> {
    cfg.validate()?;
    case.validate()?;
    let evidence = evidence_table(case, cfg);
    let (label, flags) = decide(&evidence, cfg.min_support);
    Ok(DiagnosisResult { case_id: case.case_id.clone(), label, flags, evidence, scores: class_scores(case) })
}

pub fn diagnose_batch(
    cases: &[CaseFindings],
    cfg: &FusionConfig,
    exec: Exec,
) -> Result<Vec<DiagnosisResult>, FusionError> {
    exec.map_slice(cases, |c| diagnose_case(c, cfg)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotatedRect;
    use crate::inference::Detection;
    use crate::losses::ProbVector;

    fn img(id: &str, probs: [f64; 4], dets: &[(StructureLabel, f64)]) -> ImageFindings {
        ImageFindings {
            image_id: id.into(),
            case_id: "K".into(),
            view_probs: ProbVector::new(probs.to_vec()).unwrap(),
            detections: dets
                .iter()
                .map(|&(label, confidence)| Detection {
                    label,
                    rect: RotatedRect::new(100.0, 100.0, 40.0, 20.0, 0.1).unwrap(),
                    confidence,
                })
                .collect(),
            gestational_week: 24,
        }
    }

    fn view_img(id: &str, v: ViewLabel, dets: &[(StructureLabel, f64)]) -> ImageFindings {
        let mut p = [0.0; 4];
        p[v.index()] = 1.0;
        img(id, p, dets)
    }

    fn case(images: Vec<ImageFindings>) -> CaseFindings {
        CaseFindings::new("K", 24, images).unwrap()
    }

    use StructureLabel as S;
    use ViewLabel as V;

    #[test]
    fn view_classification() {
        let cfg = FusionConfig::default();
        assert_eq!(classify_view(&img("a", [0.9, 0.05, 0.03, 0.02], &[]), &cfg), Some(V::Nlv));
        assert_eq!(classify_view(&img("a", [0.3, 0.3, 0.2, 0.2], &[]), &cfg), None);
        let cfg = FusionConfig { tau_view: 0.4, ..cfg };
        assert_eq!(classify_view(&img("a", [0.5, 0.0, 0.5, 0.0], &[]), &cfg), Some(V::Nlv));
    }

    #[test]
    fn evidence_counts() {
        let cfg = FusionConfig::default();
        let c = case(vec![
            view_img("1", V::Nlv, &[(S::UpperLip, 0.9)]),
            view_img("2", V::Napv, &[(S::AlveolarRidge, 0.9)]),
        ]);
        let t = evidence_table(&c, &cfg);
        assert_eq!(t.view_counts, [1, 1, 0, 0]);
        assert_eq!(t.structure_counts, [1, 1, 0, 0, 0]);

        let c = case(vec![view_img("1", V::Nlv, &[(S::UpperLip, 0.9), (S::CleftLip, 0.3)])]);
        assert_eq!(evidence_table(&c, &cfg).structure(S::CleftLip), 0);

        let c = case(vec![
            view_img("1", V::Nlv, &[(S::UpperLip, 0.9)]),
            view_img("2", V::Nlv, &[(S::UpperLip, 0.8)]),
        ]);
        let t = evidence_table(&c, &cfg);
        assert_eq!(t.view(V::Nlv), 2);
        assert_eq!(t.support(V::Nlv, S::UpperLip), 2);
    }

    #[test]
    fn clinical_examples() {
        let cfg = FusionConfig::default();
        let clp = case(vec![
            view_img("1", V::Clv, &[(S::CleftLip, 0.9)]),
            view_img("2", V::Capv, &[(S::CleftAlveolus, 0.8), (S::CleftPalate, 0.7)]),
        ]);
        assert_eq!(diagnose_case(&clp, &cfg).unwrap().label, Diagnosis::Clp);

        let cl = case(vec![
            view_img("1", V::Clv, &[(S::CleftLip, 0.9)]),
            view_img("2", V::Napv, &[(S::AlveolarRidge, 0.9)]),
        ]);
        let r = diagnose_case(&cl, &cfg).unwrap();
        assert_eq!(r.label, Diagnosis::Cl);
        assert!(r.flags.is_empty());

        let control = case(vec![
            view_img("1", V::Nlv, &[(S::UpperLip, 0.9)]),
            view_img("2", V::Napv, &[(S::AlveolarRidge, 0.9)]),
        ]);
        let r = diagnose_case(&control, &cfg).unwrap();
        assert_eq!(r.label, Diagnosis::Control);
        assert!(r.flags.is_empty());

        let weak = case(vec![
            view_img("1", V::Nlv, &[(S::UpperLip, 0.9), (S::CleftLip, 0.2)]),
            view_img("2", V::Napv, &[(S::AlveolarRidge, 0.9)]),
        ]);
        assert_eq!(diagnose_case(&weak, &cfg).unwrap().label, Diagnosis::Control);
    }

    #[test]
    fn flags() {
        let cfg = FusionConfig::default();
        let lip_only = case(vec![view_img("1", V::Clv, &[(S::CleftLip, 0.9)])]);
        let r = diagnose_case(&lip_only, &cfg).unwrap();
        assert_eq!(r.label, Diagnosis::Cl);
        assert!(r.flags.contains(&Flag::PalateUnassessed));

        let palate_only = case(vec![view_img("1", V::Capv, &[(S::CleftPalate, 0.9)])]);
        let r = diagnose_case(&palate_only, &cfg).unwrap();
        assert_eq!(r.label, Diagnosis::Clp);
        assert!(r.flags.contains(&Flag::LowConfidence));

        let nothing = case(vec![img("1", [0.25; 4], &[(S::UpperLip, 0.9)])]);
        let r = diagnose_case(&nothing, &cfg).unwrap();
        assert_eq!(r.label, Diagnosis::Control);
        assert!(r.flags.contains(&Flag::MissingKeyView));
    }

    #[test]
    fn input_errors() {
        assert!(matches!(CaseFindings::new("K", 24, vec![]), Err(FusionError::EmptyCase(_))));
        let mut other = view_img("1", V::Nlv, &[]);
        other.case_id = "Z".into();
        assert!(matches!(CaseFindings::new("K", 24, vec![other]), Err(FusionError::MixedCase { .. })));
        let bad = FusionConfig { tau_view: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FusionConfig { min_support: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scores_rank_the_label() {
        let cfg = FusionConfig::default();
        let clp = case(vec![
            view_img("1", V::Clv, &[(S::CleftLip, 0.9)]),
            view_img("2", V::Capv, &[(S::CleftPalate, 0.8)]),
        ]);
        let s = diagnose_case(&clp, &cfg).unwrap().scores;
        assert!(s.clp > s.cl && s.clp > s.control);
        let control = case(vec![view_img("1", V::Nlv, &[(S::UpperLip, 0.9)])]);
        let s = diagnose_case(&control, &cfg).unwrap().scores;
        assert_eq!(s.control, 1.0);
    }

    #[test]
    fn diagnosis_serde_names() {
        assert_eq!(serde_json::to_string(&Diagnosis::Clp).unwrap(), "\"CLP\"");
        assert_eq!("CL".parse::<Diagnosis>().unwrap(), Diagnosis::Cl);
        assert!(Diagnosis::Clp > Diagnosis::Cl && Diagnosis::Cl > Diagnosis::Control);
    }
}
