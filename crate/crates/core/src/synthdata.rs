//! Synthetic detection scenes: ground-truth objects, jittered and random
//! proposals, prototype-based proposal features, and a JSON-lines format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evalmetrics::iou;
use crate::rng::{keyed, Stream};
use crate::types::{BoxGeometry, GroundTruth, ImageAnnotation, ImageSample, Proposal};

/// Coordinates are snapped to this grid so corner-form storage is exact.
const GRID: f64 = 1024.0;
const MIN_SIDE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub num_proposals: usize,
    pub feature_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length of the square scene.
    pub extent: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Jittered proposals generated around each object.
    pub copies_per_object: usize,
    /// Center noise as a fraction of object size; also the log-size std.
    pub jitter: f64,
    pub feature_noise: f64,
    pub prototype_seed: u64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_proposals: 20,
            feature_dim: 16,
            min_objects: 1,
            max_objects: 3,
            extent: 100.0,
            min_size: 15.0,
            max_size: 40.0,
            copies_per_object: 4,
            jitter: 0.15,
            feature_noise: 0.25,
            prototype_seed: 0,
            seed: 0,
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(config_error("num_classes", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(config_error("feature_dim", "must be at least 1"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(config_error("min_objects", "need 1 <= min_objects <= max_objects"));
        }
        if self.copies_per_object == 0 {
            return Err(config_error("copies_per_object", "must be at least 1"));
        }
        if self.num_proposals < self.max_objects * self.copies_per_object {
            return Err(config_error(
                "num_proposals",
                format!(
                    "{} proposals cannot hold {} objects with {} copies each",
                    self.num_proposals, self.max_objects, self.copies_per_object
                ),
            ));
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(config_error("extent", "must be positive"));
        }
        if !(self.min_size >= MIN_SIDE && self.min_size <= self.max_size && self.max_size < self.extent) {
            return Err(config_error("min_size", "need 1 <= min_size <= max_size < extent"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(config_error("jitter", "must be non-negative"));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(config_error("feature_noise", "must be non-negative"));
        }
        Ok(())
    }
}

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

/// Clips to the scene, snaps to the grid and keeps each side at least
/// `MIN_SIDE` long.
fn snapped_box(cx: f64, cy: f64, w: f64, h: f64, extent: f64) -> BoxGeometry {
    let axis = |c: f64, s: f64| {
        let s = s.clamp(MIN_SIDE, extent);
        let lo = snap((c - s / 2.0).clamp(0.0, extent - MIN_SIDE));
        let hi = snap((c + s / 2.0).clamp(lo + MIN_SIDE, extent));
        (lo, hi)
    };
    let (x1, x2) = axis(cx, w);
    let (y1, y2) = axis(cy, h);
    BoxGeometry { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
}

/// Fixed random unit vectors, one per class.
pub fn class_prototypes(cfg: &SceneConfig) -> Vec<Vec<f64>> {
    let mut rng = keyed(cfg.prototype_seed, Stream::Prototype, &[cfg.num_classes as u64, cfg.feature_dim as u64]);
    (0..cfg.num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn random_box<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> BoxGeometry {
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let h = rng.random_range(cfg.min_size..=cfg.max_size);
    let cx = rng.random_range(w / 2.0..=cfg.extent - w / 2.0);
    let cy = rng.random_range(h / 2.0..=cfg.extent - h / 2.0);
    snapped_box(cx, cy, w, h, cfg.extent)
}

fn generate_image(cfg: &SceneConfig, prototypes: &[Vec<f64>], id: u64) -> ImageSample {
    let mut rng = keyed(cfg.seed, Stream::Scene, &[id]);
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let gt: Vec<GroundTruth> = (0..n_obj)
        .map(|_| GroundTruth { class: rng.random_range(1..=cfg.num_classes), geometry: random_box(cfg, &mut rng) })
        .collect();

    let mut boxes = Vec::with_capacity(cfg.num_proposals);
    for g in &gt {
        let b = g.geometry;
        for _ in 0..cfg.copies_per_object {
            let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
            let (dx, dy, sw, sh) = (n(), n(), n(), n());
            boxes.push(snapped_box(
                b.cx + cfg.jitter * b.w * dx,
                b.cy + cfg.jitter * b.h * dy,
                b.w * (cfg.jitter * sw).exp(),
                b.h * (cfg.jitter * sh).exp(),
                cfg.extent,
            ));
        }
    }
    while boxes.len() < cfg.num_proposals {
        boxes.push(random_box(cfg, &mut rng));
    }
    boxes.shuffle(&mut rng);

    let noise = Normal::new(0.0, cfg.feature_noise).expect("validated noise level");
    let proposals: Vec<Proposal> = boxes
        .into_iter()
        .enumerate()
        .map(|(index, geometry)| {
            let mut features: Vec<f64> = (0..cfg.feature_dim).map(|_| noise.sample(&mut rng)).collect();
            for (c, proto) in prototypes.iter().enumerate() {
                let overlap =
                    gt.iter().filter(|g| g.class == c + 1).map(|g| iou(&geometry, &g.geometry)).fold(0.0, f64::max);
                if overlap > 0.0 {
                    for (f, p) in features.iter_mut().zip(proto) {
                        *f += overlap * p;
                    }
                }
            }
            Proposal { index, geometry, features }
        })
        .collect();

    let classes: Vec<usize> = gt.iter().map(|g| g.class).collect();
    let annotation = ImageAnnotation::from_classes(cfg.num_classes, &classes).expect("classes drawn in range");
    ImageSample { id, proposals, annotation, ground_truth: Some(gt) }
}

/// Generates images with ids `0..n`; each image draws from its own keyed
/// stream so the result does not depend on `n`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    ensure!(n >= 1, "dataset size must be at least 1");
    let prototypes = class_prototypes(cfg);
    Ok((0..n as u64).map(|id| generate_image(cfg, &prototypes, id)).collect())
}

/// Drops ground truth, keeping ids, proposals and annotations.
pub fn to_weak(dataset: &[ImageSample]) -> Vec<ImageSample> {
    dataset.iter().map(|s| ImageSample { ground_truth: None, ..s.clone() }).collect()
}

/// Class of the best-overlapping ground truth when that overlap reaches
/// `min_iou`, background otherwise.
pub fn proposal_classes(sample: &ImageSample, min_iou: f64) -> Result<Vec<usize>> {
    let gt = sample
        .ground_truth
        .as_ref()
        .ok_or_else(|| crate::error::contract(format!("image {} has no ground truth", sample.id)))?;
    Ok(sample
        .proposals
        .iter()
        .map(|p| {
            let mut best = (0usize, 0.0f64);
            for g in gt {
                let o = iou(&p.geometry, &g.geometry);
                if o > best.1 {
                    best = (g.class, o);
                }
            }
            if best.1 >= min_iou {
                best.0
            } else {
                0
            }
        })
        .collect())
}

/// Fraction of ground-truth objects covered by some proposal at `min_iou`.
pub fn proposal_recall(dataset: &[ImageSample], min_iou: f64) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in dataset {
        for g in s.ground_truth.iter().flatten() {
            total += 1;
            if s.proposals.iter().any(|p| iou(&p.geometry, &g.geometry) >= min_iou) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    #[serde(rename = "box")]
    corners: [f64; 4],
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    class: usize,
    #[serde(rename = "box")]
    corners: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: u64,
    annotation: Vec<u8>,
    proposals: Vec<ProposalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<Vec<GroundTruthRecord>>,
}

impl ImageRecord {
    fn from_sample(s: &ImageSample) -> Self {
        let mut proposals: Vec<&Proposal> = s.proposals.iter().collect();
        proposals.sort_by_key(|p| p.index);
        Self {
            id: s.id,
            annotation: s.annotation.present.iter().map(|&b| u8::from(b)).collect(),
            proposals: proposals
                .into_iter()
                .map(|p| ProposalRecord { corners: p.geometry.corners(), features: p.features.clone() })
                .collect(),
            ground_truth: s.ground_truth.as_ref().map(|gt| {
                gt.iter().map(|g| GroundTruthRecord { class: g.class, corners: g.geometry.corners() }).collect()
            }),
        }
    }

    fn into_sample(self) -> Result<ImageSample> {
        let corners = |c: [f64; 4]| BoxGeometry::from_corners(c[0], c[1], c[2], c[3]);
        let present = self
            .annotation
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(crate::error::contract(format!("annotation bit {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let proposals = self
            .proposals
            .into_iter()
            .enumerate()
            .map(|(index, p)| Ok(Proposal { index, geometry: corners(p.corners)?, features: p.features }))
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = self
            .ground_truth
            .map(|gt| {
                gt.into_iter()
                    .map(|g| Ok(GroundTruth { class: g.class, geometry: corners(g.corners)? }))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let sample = ImageSample { id: self.id, proposals, annotation: ImageAnnotation::new(present), ground_truth };
        sample.validate()?;
        Ok(sample)
    }
}

pub fn write_dataset<W: Write>(dataset: &[ImageSample], mut out: W) -> Result<()> {
    for s in dataset {
        let line = serde_json::to_string(&ImageRecord::from_sample(s))
            .map_err(|e| crate::error::contract(format!("image {}: {e}", s.id)))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads one image per non-blank line; errors carry the 1-based line number.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: line_no, message };
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(record.into_sample().map_err(|e| parse(e.to_string()))?);
    }
    Ok(out)
}

pub fn save_dataset(dataset: &[ImageSample], path: &Path) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Vec<ImageSample>> {
    read_dataset(BufReader::new(File::open(path)?))
}
