//! Per-image predictions: the predictor contract that stands in for the
//! trained detection/classification networks, a seeded simulator
//! implementing it, feature-bundle assembly and the LSTM view head.

mod features;
mod lstm;

pub use features::{assemble_features, FeatureBundle, FEATURE_DIM, FEATURE_SLOTS};
pub use lstm::{lstm_forward, lstm_forward_trace, lstm_view_probs, LstmParams, LstmTrace};

use std::fmt;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::id_rng;
use crate::geometry::{GeometryError, RotatedRect};
use crate::losses::ProbVector;

pub const MIN_GESTATIONAL_WEEK: u8 = 14;
pub const MAX_GESTATIONAL_WEEK: u8 = 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("prediction failed for image {image_id}: {message}")]
    Predictor { image_id: String, message: String },
    #[error("invalid findings for image {image_id}: {message}")]
    InvalidFindings { image_id: String, message: String },
    #[error("noise configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Ultrasound plane of a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewLabel {
    #[serde(rename = "NLV")]
    Nlv,
    #[serde(rename = "NAPV")]
    Napv,
    #[serde(rename = "CLV")]
    Clv,
    #[serde(rename = "CAPV")]
    Capv,
}

impl ViewLabel {
    /// Fixed order; also the tie-break order for view classification.
    pub const ALL: [ViewLabel; 4] = [ViewLabel::Nlv, ViewLabel::Napv, ViewLabel::Clv, ViewLabel::Capv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Axial planes show the alveolar ridge and palate; coronal planes the lip.
    pub fn is_axial(self) -> bool {
        matches!(self, ViewLabel::Napv | ViewLabel::Capv)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::Nlv => "NLV",
            ViewLabel::Napv => "NAPV",
            ViewLabel::Clv => "CLV",
            ViewLabel::Capv => "CAPV",
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Key anatomical structure found by the detection branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureLabel {
    UpperLip,
    AlveolarRidge,
    CleftLip,
    CleftAlveolus,
    CleftPalate,
}

impl StructureLabel {
    /// Canonical slot order.
    pub const ALL: [StructureLabel; 5] = [
        StructureLabel::UpperLip,
        StructureLabel::AlveolarRidge,
        StructureLabel::CleftLip,
        StructureLabel::CleftAlveolus,
        StructureLabel::CleftPalate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_abnormal(self) -> bool {
        matches!(self, StructureLabel::CleftLip | StructureLabel::CleftAlveolus | StructureLabel::CleftPalate)
    }

    /// Overlay color.
    pub fn color(self) -> &'static str {
        match self {
            StructureLabel::UpperLip => "purple",
            StructureLabel::AlveolarRidge => "yellow",
            StructureLabel::CleftLip => "blue",
            StructureLabel::CleftAlveolus => "red",
            StructureLabel::CleftPalate => "green",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: StructureLabel,
    #[serde(rename = "box")]
    pub rect: RotatedRect,
    pub confidence: f64,
}

/// Outputs of both branches for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFindings {
    pub image_id: String,
    pub case_id: String,
    pub view_probs: ProbVector,
    pub detections: Vec<Detection>,
    pub gestational_week: u8,
}

impl ImageFindings {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let fail = |message: String| InferenceError::InvalidFindings { image_id: self.image_id.clone(), message };
        if self.view_probs.len() != ViewLabel::ALL.len() {
            return Err(fail(format!("expected 4 view probabilities, got {}", self.view_probs.len())));
        }
        if !(MIN_GESTATIONAL_WEEK..=MAX_GESTATIONAL_WEEK).contains(&self.gestational_week) {
            return Err(fail(format!("gestational week {} outside 14-28", self.gestational_week)));
        }
        if let Some(d) = self.detections.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
            return Err(fail(format!("detection confidence {} outside [0, 1]", d.confidence)));
        }
        Ok(())
    }

    /// The most probable view (ties to the fixed label order).
    pub fn top_view(&self) -> ViewLabel {
        ViewLabel::from_index(self.view_probs.argmax()).expect("four views")
    }

    pub fn view_prob(&self, v: ViewLabel) -> f64 {
        self.view_probs.as_slice()[v.index()]
    }
}

/// What a predictor is given for one image. Synthetic images carry their
/// annotation in place of pixels.
#[derive(Debug, Clone, Copy)]
pub struct ImageDescriptor<'a> {
    pub image_id: &'a str,
    pub case_id: &'a str,
    pub gestational_week: u8,
    pub annotation: Option<&'a ImageFindings>,
}

impl<'a> From<&'a ImageFindings> for ImageDescriptor<'a> {
    fn from(f: &'a ImageFindings) -> Self {
        Self { image_id: &f.image_id, case_id: &f.case_id, gestational_week: f.gestational_week, annotation: Some(f) }
    }
}

pub trait Predictor: Send + Sync {
    fn predict(&self, image: &ImageDescriptor<'_>) -> Result<ImageFindings, InferenceError>;
}

/// Runs `predictor` on one image and checks the result.
pub fn predict_image(image: &ImageDescriptor<'_>, predictor: &dyn Predictor) -> Result<ImageFindings, InferenceError> {
    let attach = |message: String| InferenceError::Predictor { image_id: image.image_id.to_string(), message };
    let out = predictor.predict(image).map_err(|e| match e {
        InferenceError::Predictor { .. } => e,
        other => attach(other.to_string()),
    })?;
    out.validate().map_err(|e| attach(e.to_string()))?;
    if out.image_id != image.image_id {
        return Err(attach(format!("predictor returned findings for {}", out.image_id)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Error model of the simulated predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Row `i` is the distribution of the predicted view given true view `i`.
    pub view_confusion: [[f64; 4]; 4],
    /// Standard deviation of Gaussian noise on the view logits; 0 gives
    /// one-hot view probabilities.
    pub view_logit_noise: f64,
    /// Logit margin of the drawn view over the others.
    pub view_logit_margin: f64,
    pub drop_prob: f64,
    /// Standard deviation (pixels) of center and side jitter.
    pub box_jitter: f64,
    /// Standard deviation (radians) of angle jitter.
    pub angle_jitter: f64,
    /// Detection confidences are redrawn from this Beta when set.
    pub confidence: Option<BetaParams>,
}

const IDENTITY4: [[f64; 4]; 4] =
    [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseConfig {
    /// Zero noise: the simulator returns its input unchanged.
    pub fn none() -> Self {
        Self {
            view_confusion: IDENTITY4,
            view_logit_noise: 0.0,
            view_logit_margin: 4.0,
            drop_prob: 0.0,
            box_jitter: 0.0,
            angle_jitter: 0.0,
            confidence: None,
        }
    }

    /// Mild confusion between normal and cleft variants of the same plane,
    /// occasional missed structures and jittered boxes.
    pub fn realistic() -> Self {
        Self {
            view_confusion: [
                [0.985, 0.0, 0.015, 0.0],
                [0.0, 0.98, 0.0, 0.02],
                [0.03, 0.0, 0.97, 0.0],
                [0.0, 0.04, 0.0, 0.96],
            ],
            view_logit_noise: 0.5,
            view_logit_margin: 4.0,
            drop_prob: 0.03,
            box_jitter: 2.0,
            angle_jitter: 0.03,
            confidence: Some(BetaParams { alpha: 8.0, beta: 2.0 }),
        }
    }

    /// View-confusion matrix with `rate` of each row spread evenly over the
    /// other three views.
    pub fn uniform_confusion(rate: f64) -> [[f64; 4]; 4] {
        let mut m = [[rate / 3.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0 - rate;
        }
        m
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        for (i, row) in self.view_confusion.iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(InferenceError::Config(format!("view confusion row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(InferenceError::Config(format!("view confusion row {i} sums to {sum}")));
            }
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(InferenceError::Config(format!("drop probability {} outside [0, 1]", self.drop_prob)));
        }
        for (name, v) in [
            ("view logit noise", self.view_logit_noise),
            ("box jitter", self.box_jitter),
            ("angle jitter", self.angle_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(InferenceError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if let Some(b) = self.confidence {
            if !(b.alpha > 0.0 && b.beta > 0.0) {
                return Err(InferenceError::Config("confidence beta parameters must be positive".into()));
            }
        }
        Ok(())
    }
}

fn sample_row<R: Rng>(rng: &mut R, row: &[f64; 4]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` past the cumulative sum: take the last non-zero cell.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(3)
}

fn jitter_rect<R: Rng>(rng: &mut R, r: &RotatedRect, noise: &NoiseConfig) -> Result<RotatedRect, GeometryError> {
    if noise.box_jitter == 0.0 && noise.angle_jitter == 0.0 {
        return Ok(*r);
    }
    let pos = Normal::new(0.0, noise.box_jitter).expect("validated jitter");
    let ang = Normal::new(0.0, noise.angle_jitter).expect("validated jitter");
    let cx = r.cx() + pos.sample(rng);
    let cy = r.cy() + pos.sample(rng);
    let w = (r.w() + pos.sample(rng)).max(0.25 * r.w());
    let h = (r.h() + pos.sample(rng)).max(0.25 * r.h());
    RotatedRect::new(cx, cy, w, h, r.phi() + ang.sample(rng))
}

/// Noisy copy of ground-truth findings. The random stream depends only on
/// `(seed, image id)`.
pub fn simulate_prediction(
    truth: &ImageFindings,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<ImageFindings, InferenceError> {
    noise.validate()?;
    let mut rng = id_rng(seed, "predict", &truth.image_id);
    let true_view = truth.view_probs.argmax();
    let drawn = sample_row(&mut rng, &noise.view_confusion[true_view]);
    let view_probs = if noise.view_logit_noise == 0.0 {
        ProbVector::one_hot(4, drawn)
    } else {
        let n = Normal::new(0.0, noise.view_logit_noise).expect("validated noise");
        let logits: Vec<f64> = (0..4)
            .map(|i| (if i == drawn { noise.view_logit_margin } else { 0.0 }) + n.sample(&mut rng))
            .collect();
        ProbVector::softmax(&logits)
    };
    let conf_dist = noise
        .confidence
        .map(|b| Beta::new(b.alpha, b.beta).map_err(|e| InferenceError::Config(e.to_string())))
        .transpose()?;
    let mut detections = Vec::with_capacity(truth.detections.len());
    for d in &truth.detections {
        if rng.random::<f64>() < noise.drop_prob {
            continue;
        }
        let rect = jitter_rect(&mut rng, &d.rect, noise).map_err(|e| InferenceError::Predictor {
            image_id: truth.image_id.clone(),
            message: e.to_string(),
        })?;
        let confidence = match &conf_dist {
            Some(b) => b.sample(&mut rng),
            None => d.confidence,
        };
        detections.push(Detection { label: d.label, rect, confidence });
    }
    Ok(ImageFindings {
        image_id: truth.image_id.clone(),
        case_id: truth.case_id.clone(),
        view_probs,
        detections,
        gestational_week: truth.gestational_week,
    })
}

/// [`Predictor`] backed by [`simulate_prediction`].
#[derive(Debug, Clone)]
pub struct SimulatedPredictor {
    noise: NoiseConfig,
    seed: u64,
}

impl SimulatedPredictor {
    pub fn new(noise: NoiseConfig, seed: u64) -> Result<Self, InferenceError> {
        noise.validate()?;
        Ok(Self { noise, seed })
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }
}

impl Predictor for SimulatedPredictor {
    fn predict(&self, image: &ImageDescriptor<'_>) -> Result<ImageFindings, InferenceError> {
        let truth = image.annotation.ok_or_else(|| InferenceError::Predictor {
            image_id: image.image_id.to_string(),
            message: "simulated predictor needs an annotated image".into(),
        })?;
        simulate_prediction(truth, &self.noise, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_image(id: &str, view: ViewLabel, labels: &[StructureLabel]) -> ImageFindings {
        ImageFindings {
            image_id: id.into(),
            case_id: "C1".into(),
            view_probs: ProbVector::one_hot(4, view.index()),
            detections: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Detection {
                    label,
                    rect: RotatedRect::new(100.0 + 40.0 * i as f64, 200.0, 60.0, 30.0, 0.2).unwrap(),
                    confidence: 1.0,
                })
                .collect(),
            gestational_week: 22,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let gt = gt_image("I1", ViewLabel::Capv, &[StructureLabel::CleftAlveolus, StructureLabel::CleftPalate]);
        assert_eq!(simulate_prediction(&gt, &NoiseConfig::none(), 5).unwrap(), gt);
    }

    #[test]
    fn drop_all() {
        let gt = gt_image("I1", ViewLabel::Clv, &[StructureLabel::CleftLip]);
        let noise = NoiseConfig { drop_prob: 1.0, ..NoiseConfig::none() };
        assert!(simulate_prediction(&gt, &noise, 5).unwrap().detections.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let gt = gt_image("I7", ViewLabel::Nlv, &[StructureLabel::UpperLip]);
        let noise = NoiseConfig::realistic();
        let a = simulate_prediction(&gt, &noise, 11).unwrap();
        let b = simulate_prediction(&gt, &noise, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = simulate_prediction(&gt, &noise, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_stochastic_confusion() {
        let mut noise = NoiseConfig::none();
        noise.view_confusion[2][1] = 0.5;
        assert!(matches!(noise.validate(), Err(InferenceError::Config(_))));
        assert!(SimulatedPredictor::new(noise, 0).is_err());
    }

    #[test]
    fn predictor_errors_carry_image_id() {
        let p = SimulatedPredictor::new(NoiseConfig::none(), 0).unwrap();
        let desc = ImageDescriptor { image_id: "I99", case_id: "C1", gestational_week: 20, annotation: None };
        match predict_image(&desc, &p) {
            Err(InferenceError::Predictor { image_id, .. }) => assert_eq!(image_id, "I99"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn findings_validation() {
        let mut f = gt_image("I1", ViewLabel::Nlv, &[StructureLabel::UpperLip]);
        assert!(f.validate().is_ok());
        f.gestational_week = 30;
        assert!(f.validate().is_err());
        f.gestational_week = 20;
        f.detections[0].confidence = 1.2;
        assert!(f.validate().is_err());
    }

    #[test]
    fn tie_break_follows_label_order() {
        let p = ProbVector::new(vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        assert_eq!(ViewLabel::from_index(p.argmax()), Some(ViewLabel::Nlv));
    }
}
