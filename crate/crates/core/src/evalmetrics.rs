//! Detection evaluation: IoU, greedy NMS, every-point average precision and
//! CorLoc.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::models::{pred_forward, PredParams};
use crate::types::{BoxGeometry, ImageSample};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    /// Image-local proposal index; breaks score ties.
    pub index: usize,
    pub class: usize,
    pub geometry: BoxGeometry,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image_id: u64,
    pub class: usize,
    pub geometry: BoxGeometry,
}

pub fn iou(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score, then image id, then proposal index.
fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.index.cmp(&b.index))
}

/// Greedy suppression: keep the best remaining detection, drop every other
/// detection of the same image overlapping it by more than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(detection_order);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j]
                && order[j].image_id == order[i].image_id
                && iou(&order[i].geometry, &order[j].geometry) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// True/false-positive flags in descending-score order. Each detection takes
/// the unmatched ground truth of its image with the highest IoU, provided
/// that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(detection_order);
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image_id != d.image_id {
                    continue;
                }
                let o = iou(&d.geometry, &gt.geometry);
                if o >= iou_thresh && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Every-point interpolated AP of one class. `None` when there is no
/// ground truth to recall.
pub fn average_precision(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let tp = match_detections(dets, gts, iou_thresh);
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // Precision envelope, right to left.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let step = 1.0 / n_gt;
    let ap = tp.iter().zip(&precision).filter(|(&t, _)| t).map(|(_, &p)| step * p).sum::<f64>();
    Some(ap.clamp(0.0, 1.0))
}

/// Per-class CorLoc over positive images plus the mean over classes that
/// have at least one positive image.
#[derive(Debug, Clone, PartialEq)]
pub struct CorLoc {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// For each class and each image containing it, succeeds iff the image's
/// highest-scoring detection of that class overlaps a ground truth of the
/// class by at least `iou_thresh`.
pub fn corloc(dets: &[Detection], gts: &[GtBox], num_classes: usize, iou_thresh: f64) -> CorLoc {
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let mut images: Vec<u64> = gts.iter().filter(|g| g.class == class).map(|g| g.image_id).collect();
        images.sort_unstable();
        images.dedup();
        if images.is_empty() {
            per_class.push(None);
            continue;
        }
        let hits = images
            .iter()
            .filter(|&&img| {
                let top =
                    dets.iter().filter(|d| d.class == class && d.image_id == img).min_by(|a, b| detection_order(a, b));
                top.is_some_and(|d| {
                    gts.iter()
                        .any(|g| g.image_id == img && g.class == class && iou(&d.geometry, &g.geometry) >= iou_thresh)
                })
            })
            .count();
        per_class.push(Some(hits as f64 / images.len() as f64));
    }
    let mean = mean_present(&per_class);
    CorLoc { per_class, mean }
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Post-processing applied to raw per-proposal detections before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_threshold: 0.0, nms_iou: 0.3, match_iou: DEFAULT_MATCH_IOU }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.score_threshold), "score threshold must lie in [0, 1]");
        ensure!((0.0..=1.0).contains(&self.nms_iou), "NMS IoU must lie in [0, 1]");
        ensure!(self.match_iou > 0.0 && self.match_iou <= 1.0, "match IoU must lie in (0, 1]");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub corloc: CorLoc,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn csv_header(num_classes: usize) -> String {
        let mut cols: Vec<String> = (1..=num_classes).map(|c| format!("ap_{c}")).collect();
        cols.push("map".into());
        cols.extend((1..=num_classes).map(|c| format!("corloc_{c}")));
        cols.push("mean_corloc".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.ap.iter().map(|&v| fmt_opt(v)).collect();
        cols.push(fmt_opt(self.map));
        cols.extend(self.corloc.per_class.iter().map(|&v| fmt_opt(v)));
        cols.push(fmt_opt(self.corloc.mean));
        cols.join(",")
    }

    /// Header plus one data row; AP uses every-point interpolation.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::csv_header(self.ap.len()));
        let _ = writeln!(s, "{}", self.csv_row());
        s
    }
}

/// Scores every (class, detection) pair across a dataset.
pub fn evaluate(dets: &[Detection], gts: &[GtBox], num_classes: usize, match_iou: f64) -> EvalReport {
    let ap: Vec<Option<f64>> = (1..=num_classes)
        .map(|c| {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
            let g: Vec<GtBox> = gts.iter().filter(|g| g.class == c).copied().collect();
            average_precision(&d, &g, match_iou)
        })
        .collect();
    let map = mean_present(&ap);
    EvalReport { ap, map, corloc: corloc(dets, gts, num_classes, match_iou) }
}

pub fn ground_truth_boxes(dataset: &[ImageSample]) -> Vec<GtBox> {
    dataset
        .iter()
        .flat_map(|s| {
            s.ground_truth.iter().flatten().map(move |g| GtBox { image_id: s.id, class: g.class, geometry: g.geometry })
        })
        .collect()
}

/// Per-class detections of the prediction head on one image: each proposal
/// yields its regressed box for every foreground class, thresholded and
/// suppressed per class.
pub fn detect(theta: &PredParams, sample: &ImageSample, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let dist = pred_forward(theta, sample)?;
    let mut out = Vec::new();
    for class in 1..dist.num_labels {
        let raw: Vec<Detection> = (0..dist.num_boxes())
            .filter(|&i| dist.prob(i, class) >= cfg.score_threshold)
            .map(|i| Detection {
                image_id: sample.id,
                index: i,
                class,
                geometry: dist.decoded_box(i, class),
                score: dist.prob(i, class),
            })
            .collect();
        out.extend(nms(&raw, cfg.nms_iou));
    }
    Ok(out)
}

pub fn evaluate_model(theta: &PredParams, dataset: &[ImageSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut dets = Vec::new();
    for s in dataset {
        dets.extend(detect(theta, s, cfg)?);
    }
    Ok(evaluate(&dets, &ground_truth_boxes(dataset), theta.num_classes(), cfg.match_iou))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxGeometry {
        BoxGeometry::from_corners(x1, y1, x2, y2).unwrap()
    }

    fn det(img: u64, index: usize, g: BoxGeometry, score: f64) -> Detection {
        Detection { image_id: img, index, class: 1, geometry: g, score }
    }

    fn gt(img: u64, g: BoxGeometry) -> GtBox {
        GtBox { image_id: img, class: 1, geometry: g }
    }

    #[test]
    fn iou_examples() {
        let a = corner(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corner(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = corner(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn nms_examples() {
        let disjoint = [det(0, 0, corner(0.0, 0.0, 1.0, 1.0), 0.5), det(0, 1, corner(2.0, 0.0, 3.0, 1.0), 0.7)];
        assert_eq!(nms(&disjoint, 0.5).len(), 2);

        let g = corner(0.0, 0.0, 1.0, 1.0);
        let kept = nms(&[det(0, 0, g, 0.8), det(0, 1, g, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        // Chain: A-B and B-C overlap 0.6, A-C only 1/3.
        let a = corner(0.0, 0.0, 10.0, 1.0);
        let b = corner(2.5, 0.0, 12.5, 1.0);
        let c = corner(5.0, 0.0, 15.0, 1.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12 && (iou(&b, &c) - 0.6).abs() < 1e-12);
        assert!(iou(&a, &c) < 0.5);
        let kept = nms(&[det(0, 2, c, 0.7), det(0, 0, a, 0.9), det(0, 1, b, 0.8)], 0.5);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn nms_never_crosses_images() {
        let g = corner(0.0, 0.0, 1.0, 1.0);
        assert_eq!(nms(&[det(0, 0, g, 0.9), det(1, 0, g, 0.8)], 0.5).len(), 2);
    }

    #[test]
    fn ap_examples() {
        let g = corner(0.0, 0.0, 10.0, 10.0);
        // IoU 0.8: 10x10 vs 10x8 inside it.
        let d = corner(0.0, 0.0, 10.0, 8.0);
        assert_eq!(average_precision(&[det(0, 0, d, 0.9)], &[gt(0, g)], 0.5), Some(1.0));
        let d = corner(0.0, 0.0, 10.0, 4.0);
        assert_eq!(average_precision(&[det(0, 0, d, 0.9)], &[gt(0, g)], 0.5), Some(0.0));
        assert_eq!(average_precision(&[det(0, 0, d, 0.9)], &[], 0.5), None);

        let g2 = corner(20.0, 20.0, 30.0, 30.0);
        let dets = [det(0, 0, g, 0.9), det(0, 1, corner(50.0, 50.0, 60.0, 60.0), 0.8), det(0, 2, g2, 0.7)];
        let ap = average_precision(&dets, &[gt(0, g), gt(0, g2)], 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let g = corner(0.0, 0.0, 10.0, 10.0);
        let flags = match_detections(&[det(0, 0, g, 0.9), det(0, 1, g, 0.8)], &[gt(0, g)], 0.5);
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn corloc_examples() {
        let g = corner(0.0, 0.0, 10.0, 10.0);
        let far = corner(50.0, 50.0, 60.0, 60.0);
        let gts: Vec<GtBox> = (0..4).map(|i| gt(i, g)).collect();
        let on: Vec<Detection> = (0..4).map(|i| det(i, 0, g, 0.9)).collect();
        assert_eq!(corloc(&on, &gts, 1, 0.5).mean, Some(1.0));
        let off: Vec<Detection> = (0..4).map(|i| det(i, 0, far, 0.9)).collect();
        assert_eq!(corloc(&off, &gts, 1, 0.5).mean, Some(0.0));
        let mut mixed = on.clone();
        mixed[3] = det(3, 0, far, 0.9);
        // A lower-scoring correct detection does not rescue image 3.
        mixed.push(det(3, 1, g, 0.1));
        assert_eq!(corloc(&mixed, &gts, 1, 0.5).mean, Some(0.75));
        assert_eq!(corloc(&on, &gts, 2, 0.5).per_class, vec![Some(1.0), None]);
    }

    #[test]
    fn report_csv_layout() {
        let r = EvalReport {
            ap: vec![Some(0.5), None],
            map: Some(0.5),
            corloc: CorLoc { per_class: vec![Some(1.0), None], mean: Some(1.0) },
        };
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("ap_1,ap_2,map,corloc_1,corloc_2,mean_corloc"));
        assert_eq!(lines.next(), Some("0.500000,nan,0.500000,1.000000,nan,1.000000"));
    }
}
