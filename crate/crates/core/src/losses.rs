//! Detection-branch loss terms: classification cross-entropy, rotated GIoU
//! loss, objectness BCE, area-ratio L2 and their sum.
//!
//! Probabilities of exactly 0 or 1 where a logarithm would diverge are
//! reported as errors, never clamped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{giou, RotatedRect};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss overflow: {0}")]
    Overflow(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: prediction has {pred} classes, target has {target}")]
    Shape { pred: usize, target: usize },
}

/// Class probabilities summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Entries must lie in `[0, 1]` and sum to one within `1e-9`. Zero entries
    /// are representable so that degenerate predictor output can reach the
    /// loss functions and be reported there.
    pub fn new(p: Vec<f64>) -> Result<Self, LossError> {
        if p.is_empty() {
            return Err(LossError::Domain("empty probability vector".into()));
        }
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::Domain(format!("probability {bad} outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(LossError::Domain(format!("probabilities sum to {sum}")));
        }
        Ok(Self(p))
    }

    /// One-hot vector of length `n` at `index`.
    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut p = vec![0.0; n];
        p[index] = 1.0;
        Self(p)
    }

    /// Numerically stable softmax.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = LossError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// One-hot class target over `n` categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotTarget {
    pub index: usize,
    pub n: usize,
}

impl OneHotTarget {
    pub fn new(index: usize, n: usize) -> Result<Self, LossError> {
        if index >= n {
            return Err(LossError::Domain(format!("class {index} out of range for {n} categories")));
        }
        Ok(Self { index, n })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.n).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}

fn check_shape(p: &ProbVector, y: &OneHotTarget) -> Result<(), LossError> {
    if p.len() != y.n {
        return Err(LossError::Shape { pred: p.len(), target: y.n });
    }
    Ok(())
}

/// `-Σ y_i ln p_i`, i.e. `-ln p[true]`.
pub fn cross_entropy(p: &ProbVector, y: &OneHotTarget) -> Result<f64, LossError> {
    check_shape(p, y)?;
    let pt = p.0[y.index];
    if pt <= 0.0 {
        return Err(LossError::Overflow(format!("zero probability at true class {}", y.index)));
    }
    Ok(-pt.ln())
}

/// Gradient of [`cross_entropy`] with respect to each probability entry.
pub fn cross_entropy_grad(p: &ProbVector, y: &OneHotTarget) -> Result<Vec<f64>, LossError> {
    check_shape(p, y)?;
    let pt = p.0[y.index];
    if pt <= 0.0 {
        return Err(LossError::Overflow(format!("zero probability at true class {}", y.index)));
    }
    let mut g = vec![0.0; p.len()];
    g[y.index] = -1.0 / pt;
    Ok(g)
}

/// `1 - GIoU`. Value only: the clipped-polygon area is piecewise smooth.
pub fn giou_loss(a: &RotatedRect, b: &RotatedRect) -> f64 {
    1.0 - giou(a, b)
}

fn check_open_unit(p_hat: f64) -> Result<(), LossError> {
    if p_hat.is_nan() || p_hat < 0.0 || p_hat > 1.0 {
        return Err(LossError::Domain(format!("objectness {p_hat} outside (0, 1)")));
    }
    if p_hat == 0.0 || p_hat == 1.0 {
        return Err(LossError::Overflow(format!("objectness {p_hat} saturates the log")));
    }
    Ok(())
}

/// Binary cross-entropy for one objectness prediction.
pub fn bce_objectness(p_hat: f64, y: bool) -> Result<f64, LossError> {
    check_open_unit(p_hat)?;
    Ok(if y { -p_hat.ln() } else { -(-p_hat).ln_1p() })
}

pub fn bce_objectness_grad(p_hat: f64, y: bool) -> Result<f64, LossError> {
    check_open_unit(p_hat)?;
    Ok(if y { -1.0 / p_hat } else { 1.0 / (1.0 - p_hat) })
}

/// Summed objectness BCE over a set of predicted boxes.
pub fn bce_sum(preds: &[(f64, bool)]) -> Result<f64, LossError> {
    preds.iter().map(|&(p, y)| bce_objectness(p, y)).sum()
}

fn check_ratio(theta: f64, name: &str) -> Result<(), LossError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(LossError::Domain(format!("{name} area ratio {theta} outside (0, 1]")));
    }
    Ok(())
}

/// Squared error between predicted and target area ratios.
pub fn ratio_loss(theta_pred: f64, theta_target: f64) -> Result<f64, LossError> {
    check_ratio(theta_pred, "predicted")?;
    check_ratio(theta_target, "target")?;
    let d = theta_pred - theta_target;
    Ok(d * d)
}

/// Derivative of [`ratio_loss`] with respect to the prediction.
pub fn ratio_loss_grad(theta_pred: f64, theta_target: f64) -> Result<f64, LossError> {
    check_ratio(theta_pred, "predicted")?;
    check_ratio(theta_target, "target")?;
    Ok(2.0 * (theta_pred - theta_target))
}

/// Per-term weights for the detection loss; the plain sum uses all ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub iou: f64,
    pub bce: f64,
    pub ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, iou: 1.0, bce: 1.0, ratio: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub iou: f64,
    pub bce: f64,
    pub ratio: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.cls * self.cls + w.iou * self.iou + w.bce * self.bce + w.ratio * self.ratio
    }
}

/// `L = L_cls + L_IoU + L_bce + L_ratio`.
pub fn detection_total(cls: f64, iou: f64, bce: f64, ratio: f64) -> f64 {
    LossComponents { cls, iou, bce, ratio }.total(&LossWeights::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cross_entropy_examples() {
        let p = ProbVector::new(vec![0.1, 0.7, 0.1, 0.1]).unwrap();
        let y = OneHotTarget::new(1, 4).unwrap();
        assert!(close(cross_entropy(&p, &y).unwrap(), 0.356_674_943_938_732_4, 1e-12));
        let certain = ProbVector::one_hot(4, 2);
        assert_eq!(cross_entropy(&certain, &OneHotTarget::new(2, 4).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_errors() {
        let p = ProbVector::one_hot(3, 0);
        let y = OneHotTarget::new(1, 3).unwrap();
        assert!(matches!(cross_entropy(&p, &y), Err(LossError::Overflow(_))));
        let y4 = OneHotTarget::new(1, 4).unwrap();
        assert!(matches!(cross_entropy(&p, &y4), Err(LossError::Shape { .. })));
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(OneHotTarget::new(3, 3).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!(close(bce_objectness(0.5, true).unwrap(), std::f64::consts::LN_2, 1e-15));
        assert!(close(bce_objectness(0.9, true).unwrap(), 0.105_360_515_657_826_3, 1e-12));
        assert!(matches!(bce_objectness(1.0, true), Err(LossError::Overflow(_))));
        assert!(matches!(bce_objectness(0.0, false), Err(LossError::Overflow(_))));
        assert!(matches!(bce_objectness(1.5, false), Err(LossError::Domain(_))));
    }

    #[test]
    fn bce_mirror_symmetry() {
        for p in [0.01, 0.2, 0.5, 0.73, 0.999] {
            for y in [false, true] {
                let a = bce_objectness(p, y).unwrap();
                let b = bce_objectness(1.0 - p, !y).unwrap();
                assert!(close(a, b, 1e-12), "{p} {y}");
            }
        }
    }

    #[test]
    fn ratio_examples() {
        assert!(close(ratio_loss(0.8, 0.5).unwrap(), 0.09, 1e-15));
        assert_eq!(ratio_loss(0.42, 0.42).unwrap(), 0.0);
        assert!(ratio_loss(0.0, 0.5).is_err());
        assert!(ratio_loss(0.5, 1.2).is_err());
    }

    #[test]
    fn giou_loss_examples() {
        let a = RotatedRect::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = RotatedRect::from_corners(10.0, 0.0, 11.0, 1.0).unwrap();
        assert_eq!(giou_loss(&a, &a), 0.0);
        assert!(close(giou_loss(&a, &b), 1.0 + 9.0 / 11.0, 1e-12));
        assert_eq!(giou_loss(&a, &b), 1.0 - giou(&a, &b));
    }

    #[test]
    fn total_examples() {
        assert_eq!(detection_total(0.0, 0.0, 0.0, 0.0), 0.0);
        assert!(close(detection_total(0.3567, 0.0, 0.6931, 0.09), 1.1398, 1e-12));
        let a = detection_total(0.3567, 0.25, 0.6931, 0.09);
        let b = detection_total(0.09, 0.6931, 0.25, 0.3567);
        assert!(close(a, b, 1e-15));
        let w = LossWeights { cls: 2.0, ..Default::default() };
        let c = LossComponents { cls: 1.0, iou: 1.0, bce: 1.0, ratio: 1.0 };
        assert_eq!(c.total(&w), 5.0);
    }
}
