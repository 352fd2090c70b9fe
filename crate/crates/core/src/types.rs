//! Domain types shared by every module.
//!
//! Class labels live on a `C + 1` wide axis with `0` reserved for
//! background; annotation bit `j - 1` records whether foreground class `j`
//! is present in the image.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::loss::box_decode;

/// Default ceiling on `(C + 1)^B` for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Axis-aligned box in center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGeometry {
    /// Reference frame centered at the origin with unit extent.
    pub const UNIT: BoxGeometry = BoxGeometry { cx: 0.0, cy: 0.0, w: 1.0, h: 1.0 };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoxGeometry { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.cx.is_finite() && self.cy.is_finite(),
            "box center must be finite, got ({}, {})",
            self.cx,
            self.cy
        );
        ensure!(
            self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite(),
            "box extent must be positive and finite, got {}x{}",
            self.w,
            self.h
        );
        Ok(())
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub index: usize,
    pub geometry: BoxGeometry,
    pub features: Vec<f64>,
}

/// Image-level presence bits, one per foreground class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub present: Vec<bool>,
}

impl ImageAnnotation {
    pub fn new(present: Vec<bool>) -> Self {
        Self { present }
    }

    /// Annotation with exactly the given 1-based classes present.
    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut present = vec![false; num_classes];
        for &c in classes {
            ensure!((1..=num_classes).contains(&c), "class {c} outside 1..={num_classes}");
            present[c - 1] = true;
        }
        Ok(Self { present })
    }

    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        class >= 1 && self.present.get(class - 1).copied().unwrap_or(false)
    }

    /// Foreground classes (1-based) that must appear in a compatible labeling.
    pub fn required(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().enumerate().filter(|(_, &p)| p).map(|(j, _)| j + 1)
    }

    pub fn num_required(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        ensure!(
            self.present.len() == num_classes,
            "annotation has {} bits but {num_classes} classes are configured",
            self.present.len()
        );
        Ok(())
    }
}

/// Joint assignment of a class and a regressed box to every proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxLabeling {
    pub classes: Vec<usize>,
    pub boxes: Vec<BoxGeometry>,
}

impl BoxLabeling {
    pub fn new(classes: Vec<usize>, boxes: Vec<BoxGeometry>) -> Result<Self> {
        ensure!(classes.len() == boxes.len(), "labeling has {} classes but {} boxes", classes.len(), boxes.len());
        Ok(Self { classes, boxes })
    }

    /// Labeling whose boxes are the given anchors unchanged.
    pub fn on_anchors(classes: Vec<usize>, anchors: &[BoxGeometry]) -> Result<Self> {
        Self::new(classes, anchors.to_vec())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, i: usize) -> (usize, BoxGeometry) {
        (self.classes[i], self.boxes[i])
    }

    pub fn foreground_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub geometry: BoxGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: u64,
    pub proposals: Vec<Proposal>,
    pub annotation: ImageAnnotation,
    /// Held out for evaluation; training code never reads it.
    pub ground_truth: Option<Vec<GroundTruth>>,
}

impl ImageSample {
    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn anchors(&self) -> Vec<BoxGeometry> {
        self.proposals.iter().map(|p| p.geometry).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.proposals.first().map(|p| p.features.len())
    }

    /// Checks the structural invariants: unique in-range proposal indices,
    /// a single feature dimension, and ground truth consistent with the
    /// annotation when present.
    pub fn validate(&self) -> Result<()> {
        let b = self.proposals.len();
        let mut seen = vec![false; b];
        let dim = self.feature_dim().unwrap_or(0);
        for p in &self.proposals {
            ensure!(p.index < b, "proposal index {} out of range 0..{b}", p.index);
            ensure!(!seen[p.index], "duplicate proposal index {}", p.index);
            seen[p.index] = true;
            ensure!(
                p.features.len() == dim,
                "proposal {} has feature dimension {} (expected {dim})",
                p.index,
                p.features.len()
            );
            p.geometry.validate()?;
        }
        if let Some(gt) = &self.ground_truth {
            let c = self.annotation.num_classes();
            let mut from_gt = vec![false; c];
            for g in gt {
                ensure!((1..=c).contains(&g.class), "ground-truth class {} outside 1..={c}", g.class);
                g.geometry.validate()?;
                from_gt[g.class - 1] = true;
            }
            ensure!(
                from_gt == self.annotation.present,
                "image {}: annotation disagrees with ground-truth classes",
                self.id
            );
        }
        Ok(())
    }
}

/// Factorized per-proposal class distribution with per-class box offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub anchors: Vec<BoxGeometry>,
    pub num_labels: usize,
    /// Row-major `B x (C + 1)`.
    pub probs: Vec<f64>,
    /// Row-major `B x (C + 1)` regression offsets.
    pub offsets: Vec<[f64; 4]>,
}

impl ClassDistribution {
    pub fn num_boxes(&self) -> usize {
        self.anchors.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn prob(&self, i: usize, c: usize) -> f64 {
        self.probs[i * self.num_labels + c]
    }

    pub fn offset(&self, i: usize, c: usize) -> [f64; 4] {
        self.offsets[i * self.num_labels + c]
    }

    pub fn decoded_box(&self, i: usize, c: usize) -> BoxGeometry {
        box_decode(&self.anchors[i], &self.offset(i, c))
    }

    /// Most probable class per proposal, lowest index on ties.
    pub fn map_labeling(&self) -> BoxLabeling {
        let classes: Vec<usize> = (0..self.num_boxes()).map(|i| argmax_first(self.row(i))).collect();
        let boxes = classes.iter().enumerate().map(|(i, &c)| self.decoded_box(i, c)).collect();
        BoxLabeling { classes, boxes }
    }
}

/// Per-proposal, per-label scores from one conditional forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub anchors: Vec<BoxGeometry>,
    pub num_labels: usize,
    /// Row-major `B x (C + 1)`.
    pub scores: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

impl ScoreMatrix {
    /// Builds a matrix from rows with zero offsets; convenient for tests and
    /// for callers that only care about classes.
    pub fn from_rows(rows: &[Vec<f64>], anchors: Vec<BoxGeometry>) -> Result<Self> {
        ensure!(rows.len() == anchors.len(), "{} score rows for {} anchors", rows.len(), anchors.len());
        let num_labels = rows.first().map_or(0, |r| r.len());
        ensure!(num_labels >= 1, "score rows must be non-empty");
        ensure!(rows.iter().all(|r| r.len() == num_labels), "ragged score rows");
        let scores: Vec<f64> = rows.iter().flatten().copied().collect();
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix".into()));
        }
        let offsets = vec![[0.0; 4]; scores.len()];
        Ok(Self { anchors, num_labels, scores, offsets })
    }

    /// Same as [`ScoreMatrix::from_rows`] with every anchor set to the unit box.
    pub fn from_rows_unit(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_rows(rows, vec![BoxGeometry::UNIT; rows.len()])
    }

    pub fn num_boxes(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_labels - 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn score(&self, i: usize, c: usize) -> f64 {
        self.scores[i * self.num_labels + c]
    }

    pub fn offset(&self, i: usize, c: usize) -> [f64; 4] {
        self.offsets[i * self.num_labels + c]
    }

    pub fn decoded_box(&self, i: usize, c: usize) -> BoxGeometry {
        box_decode(&self.anchors[i], &self.offset(i, c))
    }

    /// Attaches decoded geometry to a class vector.
    pub fn labeling(&self, classes: Vec<usize>) -> BoxLabeling {
        let boxes = classes.iter().enumerate().map(|(i, &c)| self.decoded_box(i, c)).collect();
        BoxLabeling { classes, boxes }
    }

    /// Softmax of row `i`.
    pub fn row_softmax(&self, i: usize) -> Vec<f64> {
        softmax(self.row(i))
    }
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// True iff every class marked present in `annotation` is assigned to at
/// least one proposal.
pub fn is_compatible(labeling: &BoxLabeling, annotation: &ImageAnnotation) -> Result<bool> {
    is_compatible_classes(&labeling.classes, annotation)
}

pub fn is_compatible_classes(classes: &[usize], annotation: &ImageAnnotation) -> Result<bool> {
    let c = annotation.num_classes();
    let mut seen = vec![false; c + 1];
    for &y in classes {
        ensure!(y <= c, "label {y} outside 0..={c}");
        seen[y] = true;
    }
    Ok(annotation.required().all(|j| seen[j]))
}

/// Every class vector in `{0..=C}^B`, lexicographic, last position fastest.
#[derive(Debug, Clone)]
pub struct Labelings {
    num_classes: usize,
    next: Option<Vec<usize>>,
}

impl Iterator for Labelings {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut pos = succ.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            if succ[pos] < self.num_classes {
                succ[pos] += 1;
                self.next = Some(succ);
                break;
            }
            succ[pos] = 0;
        }
        Some(current)
    }
}

pub fn enumerate_labelings(b: usize, c: usize) -> Result<Labelings> {
    enumerate_labelings_capped(b, c, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_labelings_capped(b: usize, c: usize, cap: u64) -> Result<Labelings> {
    let count = labeling_count(b, c);
    if count > cap as u128 {
        return Err(Error::TooLarge { count, cap });
    }
    Ok(Labelings { num_classes: c, next: Some(vec![0; b]) })
}

/// `(C + 1)^B`, saturating.
pub fn labeling_count(b: usize, c: usize) -> u128 {
    let base = (c as u128) + 1;
    let mut n: u128 = 1;
    for _ in 0..b {
        n = n.saturating_mul(base);
    }
    n
}
