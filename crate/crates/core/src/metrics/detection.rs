use serde::{Deserialize, Serialize};

use crate::geometry::{iou, RotatedRect};
use crate::inference::StructureLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub image_id: String,
    pub label: StructureLabel,
    #[serde(rename = "box")]
    pub rect: RotatedRect,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub label: StructureLabel,
    #[serde(rename = "box")]
    pub rect: RotatedRect,
}

/// All-point interpolated AP of one class's detections. Detections are
/// matched greedily in descending confidence (ties keep input order), each to
/// the unmatched ground truth of the same image with the highest IoU at or
/// above `iou_threshold`. `None` when there is no ground truth.
pub fn average_precision(dets: &[&ScoredDetection], gts: &[&GroundTruthBox], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for &k in &order {
        let d = dets[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.rect, &gt.rect);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        hits.push(best.is_some());
    }
    // Precision/recall after each detection, then the upper envelope.
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        precision.push(tp / (i + 1) as f64);
        recall.push(tp / n_gt);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: Vec<(StructureLabel, f64)>,
    /// Classes without ground truth, left out of the mean.
    pub excluded: Vec<StructureLabel>,
    pub map: Option<f64>,
}

pub fn mean_average_precision(dets: &[ScoredDetection], gts: &[GroundTruthBox], iou_threshold: f64) -> MapReport {
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for label in StructureLabel::ALL {
        let d: Vec<&ScoredDetection> = dets.iter().filter(|d| d.label == label).collect();
        let g: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.label == label).collect();
        match average_precision(&d, &g, iou_threshold) {
            Some(ap) => per_class.push((label, ap)),
            None => excluded.push(label),
        }
    }
    let map = (!per_class.is_empty()).then(|| per_class.iter().map(|c| c.1).sum::<f64>() / per_class.len() as f64);
    MapReport { per_class, excluded, map }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: &str, x: f64) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img.into(),
            label: StructureLabel::CleftLip,
            rect: RotatedRect::new(x, 50.0, 20.0, 10.0, 0.2).unwrap(),
        }
    }

    fn det(img: &str, x: f64, c: f64) -> ScoredDetection {
        ScoredDetection {
            image_id: img.into(),
            label: StructureLabel::CleftLip,
            rect: RotatedRect::new(x, 50.0, 20.0, 10.0, 0.2).unwrap(),
            confidence: c,
        }
    }

    #[test]
    fn single_match() {
        let (d, g) = (det("a", 10.0, 0.9), gt("a", 10.0));
        assert_eq!(average_precision(&[&d], &[&g], 0.5), Some(1.0));
    }

    #[test]
    fn no_overlap() {
        let (d, g) = (det("a", 200.0, 0.9), gt("a", 10.0));
        assert_eq!(average_precision(&[&d], &[&g], 0.5), Some(0.0));
        let other_image = det("b", 10.0, 0.9);
        assert_eq!(average_precision(&[&other_image], &[&g], 0.5), Some(0.0));
    }

    #[test]
    fn false_positive_first() {
        // FP at 0.9 then TP at 0.8: precision 1/2 at recall 1.
        let g = gt("a", 10.0);
        let (fp, tp) = (det("a", 300.0, 0.9), det("a", 10.0, 0.8));
        assert_eq!(average_precision(&[&fp, &tp], &[&g], 0.5), Some(0.5));
    }

    #[test]
    fn duplicate_detections() {
        let g = gt("a", 10.0);
        let (d1, d2) = (det("a", 10.0, 0.9), det("a", 10.5, 0.8));
        assert_eq!(average_precision(&[&d1, &d2], &[&g], 0.5), Some(1.0));
    }

    #[test]
    fn map_excludes_empty_classes() {
        let r = mean_average_precision(&[det("a", 10.0, 0.9)], &[gt("a", 10.0)], 0.5);
        assert_eq!(r.per_class, vec![(StructureLabel::CleftLip, 1.0)]);
        assert_eq!(r.excluded.len(), 4);
        assert_eq!(r.map, Some(1.0));
        assert_eq!(mean_average_precision(&[], &[], 0.5).map, None);
    }
}
