//! Coordinate descent between the two heads: direct-loss-minimization
//! updates of the conditional head against prediction pseudo labels, then
//! SGD on the prediction head against post-processed conditional samples.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::{disc, DiscConfig};
use crate::error::{ensure, Error, Result};
use crate::evalmetrics::{corloc, ground_truth_boxes, iou, Detection, DEFAULT_MATCH_IOU};
use crate::loss::LossConfig;
use crate::models::{
    accumulate_regression, accumulate_score_diff, cond_forward, pred_forward, pred_objective_grad_weighted, CondParams,
    NoiseVector, PredParams, DEFAULT_NOISE_DIM,
};
use crate::rng::{keyed, Stream};
use crate::sampler::{constrained_argmax_with, loss_augmented_argmax_with, SamplerMode};
use crate::types::{is_compatible, BoxLabeling, ImageAnnotation, ImageSample, ScoreMatrix};

/// Which self-diversity terms take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `(Pr_p, Pr_c)`: both heads probabilistic.
    Full,
    /// `(Pr_p, PW_c)`: zero noise, one conditional sample, no conditional
    /// self-diversity.
    PwCond,
    /// `(PW_p, Pr_c)`: no prediction self-diversity.
    PwPred,
    /// `(PW_p, PW_c)`: neither self-diversity term.
    PwBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::PwCond, Variant::PwPred, Variant::PwBoth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PwCond => "pw_cond",
            Variant::PwPred => "pw_pred",
            Variant::PwBoth => "pw_both",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "(Pr_p, Pr_c)",
            Variant::PwCond => "(Pr_p, PW_c)",
            Variant::PwPred => "(PW_p, Pr_c)",
            Variant::PwBoth => "(PW_p, PW_c)",
        }
    }

    fn pointwise_cond(self) -> bool {
        matches!(self, Variant::PwCond | Variant::PwBoth)
    }

    fn pointwise_pred(self) -> bool {
        matches!(self, Variant::PwPred | Variant::PwBoth)
    }
}

/// How prediction-head labelings are turned into pseudo labels for the
/// conditional head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabels {
    /// Row-wise most probable label.
    Map,
    /// Most probable labeling that satisfies the image annotation, found by
    /// the exact sampler on log-probabilities.
    Constrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub k: usize,
    pub epsilon: f64,
    pub eta: f64,
    /// Multiplier applied to `eta` after every outer round.
    pub eta_decay: f64,
    pub lambda: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub outer_rounds: usize,
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_dim: usize,
    /// Zero keeps both heads linear.
    pub hidden_units: usize,
    pub sampler: SamplerMode,
    pub variant: Variant,
    pub pseudo_labels: PseudoLabels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            k: 5,
            epsilon: 1.0,
            eta: 1.5,
            eta_decay: 1.0,
            lambda: 3.0,
            score_threshold: 0.2,
            nms_iou: 0.3,
            outer_rounds: 6,
            inner_epochs: 10,
            batch_size: 1,
            seed: 0,
            noise_dim: DEFAULT_NOISE_DIM,
            hidden_units: 0,
            sampler: SamplerMode::Exact,
            variant: Variant::Full,
            pseudo_labels: PseudoLabels::Constrained,
        }
    }
}

fn field_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(field_error("gamma", "must lie in [0, 1]"));
        }
        if self.k < 2 {
            return Err(field_error("k", "at least two conditional samples are required"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(field_error("eta", "must be positive"));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return Err(field_error("eta_decay", "must lie in (0, 1]"));
        }
        if !(self.epsilon.is_finite() && self.epsilon != 0.0) {
            return Err(field_error("epsilon", "must be finite and non-zero"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(field_error("lambda", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(field_error("score_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(field_error("nms_iou", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(field_error("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda }
    }

    pub fn disc(&self) -> DiscConfig {
        DiscConfig { gamma: self.gamma, loss: self.loss() }
    }

    /// Conditional samples drawn per image.
    pub fn samples_per_image(&self) -> usize {
        if self.variant.pointwise_cond() {
            1
        } else {
            self.k
        }
    }

    fn cond_self_weight(&self) -> f64 {
        if self.variant.pointwise_cond() {
            0.0
        } else {
            self.gamma
        }
    }

    fn pred_self_weight(&self) -> f64 {
        if self.variant.pointwise_pred() {
            0.0
        } else {
            1.0 - self.gamma
        }
    }

    pub fn eta_at(&self, round: usize) -> f64 {
        self.eta * self.eta_decay.powi(round as i32)
    }

    /// Noise vectors for one image; all zeros for a pointwise conditional.
    pub fn draw_noise(&self, stream: Stream, key: &[u64]) -> Vec<NoiseVector> {
        if self.variant.pointwise_cond() {
            return vec![NoiseVector::zeros(self.noise_dim)];
        }
        (0..self.k as u64)
            .map(|k| {
                let mut full = key.to_vec();
                full.push(k);
                NoiseVector::sample(self.noise_dim, &mut keyed(self.seed, stream, &full))
            })
            .collect()
    }
}

/// `K` draws from the conditional head for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSamples {
    pub labelings: Vec<BoxLabeling>,
    pub noises: Vec<NoiseVector>,
    pub scores: Vec<ScoreMatrix>,
}

/// Constrained argmax under each of the given noise vectors.
pub fn sample_conditional_with_noise(
    theta: &CondParams,
    sample: &ImageSample,
    noises: Vec<NoiseVector>,
    mode: SamplerMode,
) -> Result<ConditionalSamples> {
    ensure!(sample.annotation.num_required() >= 1, "image {} has no positive class", sample.id);
    let mut labelings = Vec::with_capacity(noises.len());
    let mut scores = Vec::with_capacity(noises.len());
    for z in &noises {
        let g = cond_forward(theta, sample, z)?;
        labelings.push(constrained_argmax_with(&g, &sample.annotation, mode)?);
        scores.push(g);
    }
    Ok(ConditionalSamples { labelings, noises, scores })
}

/// Draws `k` uniform noise vectors from `rng` and samples under each.
pub fn sample_conditional<R: Rng + ?Sized>(
    theta: &CondParams,
    sample: &ImageSample,
    k: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<ConditionalSamples> {
    let noises = (0..k).map(|_| NoiseVector::sample(theta.noise_dim, rng)).collect();
    sample_conditional_with_noise(theta, sample, noises, mode)
}

/// Turns conditional samples into pseudo ground truth. Foreground boxes of
/// classes outside the annotation or below `score_threshold` (row softmax)
/// become background, then each class goes through greedy NMS at
/// `nms_iou`. A required class left without boxes keeps its single
/// highest-scoring box, so every output stays compatible.
pub fn postprocess_samples(
    labelings: &[BoxLabeling],
    scores: &[ScoreMatrix],
    annotation: &ImageAnnotation,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<BoxLabeling>> {
    ensure!(labelings.len() == scores.len(), "{} labelings but {} score matrices", labelings.len(), scores.len());
    labelings.iter().zip(scores).map(|(y, g)| postprocess_one(y, g, annotation, score_threshold, nms_iou)).collect()
}

fn postprocess_one(
    y: &BoxLabeling,
    g: &ScoreMatrix,
    annotation: &ImageAnnotation,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<BoxLabeling> {
    let b = y.len();
    ensure!(g.num_boxes() == b, "labeling covers {b} proposals, scores {}", g.num_boxes());
    ensure!(is_compatible(y, annotation)?, "labeling is not compatible with its annotation");
    let prob: Vec<f64> = (0..b).map(|i| if y.classes[i] == 0 { 0.0 } else { g.row_softmax(i)[y.classes[i]] }).collect();
    let by_score = |a: &usize, b: &usize| prob[*b].partial_cmp(&prob[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));

    let mut out = y.classes.clone();
    for class in 1..g.num_labels {
        let mut members: Vec<usize> = (0..b).filter(|&i| y.classes[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(by_score);
        let best = members[0];
        let mut kept: Vec<usize> = Vec::new();
        if annotation.contains(class) {
            for &i in &members {
                if prob[i] < score_threshold {
                    continue;
                }
                if kept.iter().all(|&j| iou(&y.boxes[j], &y.boxes[i]) <= nms_iou) {
                    kept.push(i);
                }
            }
            if kept.is_empty() {
                kept.push(best);
            }
        }
        for &i in &members {
            if !kept.contains(&i) {
                out[i] = 0;
            }
        }
    }
    let boxes = out
        .iter()
        .enumerate()
        .map(|(i, &c)| if c == y.classes[i] { y.boxes[i] } else { g.decoded_box(i, 0) })
        .collect();
    BoxLabeling::new(out, boxes)
}

/// Labeling of the prediction head handed to the conditional update.
/// Foreground labels of classes outside the annotation are moved to
/// background in either mode.
pub fn prediction_pseudo_labels(theta: &PredParams, sample: &ImageSample, mode: PseudoLabels) -> Result<BoxLabeling> {
    let dist = pred_forward(theta, sample)?;
    let mut y = match mode {
        PseudoLabels::Map => dist.map_labeling(),
        PseudoLabels::Constrained => {
            let rows: Vec<Vec<f64>> = (0..dist.num_boxes())
                .map(|i| dist.row(i).iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect())
                .collect();
            let mut g = ScoreMatrix::from_rows(&rows, dist.anchors.clone())?;
            g.offsets = dist.offsets.clone();
            constrained_argmax_with(&g, &sample.annotation, SamplerMode::Exact)?
        }
    };
    for i in 0..y.len() {
        if y.classes[i] != 0 && !sample.annotation.contains(y.classes[i]) {
            y.classes[i] = 0;
            y.boxes[i] = dist.decoded_box(i, 0);
        }
    }
    Ok(y)
}

/// Processes batch members in ascending image id so sums do not depend on
/// batch order.
fn id_order(batch: &[&ImageSample]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| (batch[i].id, i));
    order
}

/// One SGD step on the prediction objective averaged over `batch`.
/// Returns the new parameters and the mean objective before the step.
pub fn pred_step(
    theta: &PredParams,
    batch: &[&ImageSample],
    pseudo: &[&[BoxLabeling]],
    cfg: &TrainConfig,
    eta: f64,
) -> Result<(PredParams, f64)> {
    ensure!(batch.len() == pseudo.len(), "batch has {} images but {} pseudo-label sets", batch.len(), pseudo.len());
    ensure!(!batch.is_empty(), "empty batch");
    let mut total = theta.zeros_like();
    let mut value = 0.0;
    let loss = cfg.loss();
    for i in id_order(batch) {
        let (v, g) = pred_objective_grad_weighted(theta, batch[i], pseudo[i], &loss, cfg.pred_self_weight())?;
        value += v;
        total.head.axpy(1.0, &g.head);
    }
    let n = batch.len() as f64;
    if !total.head.is_finite() {
        let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
        return Err(Error::NonFinite(format!("prediction gradient for images {ids:?}")));
    }
    let mut next = theta.clone();
    next.head.axpy(-eta / n, &total.head);
    Ok((next, value / n))
}

/// Per-image direct-loss-minimization estimate of the conditional gradient,
/// with the smooth-L1 pathway of the conditional offsets added exactly.
pub fn cond_gradient(
    theta: &CondParams,
    sample: &ImageSample,
    y_p: &BoxLabeling,
    noises: &[NoiseVector],
    cfg: &TrainConfig,
) -> Result<CondParams> {
    let k = noises.len();
    ensure!(k >= 1, "at least one noise vector is required");
    let b = sample.num_proposals();
    ensure!(y_p.len() == b, "pseudo labels cover {} proposals, image {b}", y_p.len());
    let loss = cfg.loss();
    let a = &sample.annotation;
    let drawn = sample_conditional_with_noise(theta, sample, noises.to_vec(), cfg.sampler)?;
    let (yc, scores) = (&drawn.labelings, &drawn.scores);
    let inv_eps = 1.0 / cfg.epsilon;
    let kb = (k * b) as f64;
    let mut grad = theta.zeros_like();

    for kk in 0..k {
        let z = &noises[kk];
        let ya = loss_augmented_argmax_with(&scores[kk], a, y_p, cfg.epsilon, &loss, cfg.sampler)?;
        accumulate_score_diff(theta, sample, z, &ya.classes, Some(&yc[kk].classes), inv_eps / kb, &mut grad)?;
        accumulate_regression(theta, sample, z, &yc[kk], y_p, loss.lambda, 1.0 / k as f64, &mut grad)?;
    }

    let gamma = cfg.cond_self_weight();
    if k >= 2 && gamma != 0.0 {
        let pair = gamma * 2.0 / (k * (k - 1)) as f64;
        for kk in 0..k {
            let z = &noises[kk];
            for other in 0..k {
                if other == kk {
                    continue;
                }
                let yb = loss_augmented_argmax_with(&scores[kk], a, &yc[other], cfg.epsilon, &loss, cfg.sampler)?;
                accumulate_score_diff(
                    theta,
                    sample,
                    z,
                    &yb.classes,
                    Some(&yc[other].classes),
                    -pair * inv_eps / b as f64,
                    &mut grad,
                )?;
            }
        }
    }
    if !grad.head.is_finite() {
        return Err(Error::NonFinite(format!("conditional gradient for image {}", sample.id)));
    }
    Ok(grad)
}

/// One update of the conditional head averaged over `batch`.
pub fn cond_step(
    theta: &CondParams,
    batch: &[&ImageSample],
    y_p: &[&BoxLabeling],
    noises: &[Vec<NoiseVector>],
    cfg: &TrainConfig,
    eta: f64,
) -> Result<CondParams> {
    ensure!(batch.len() == y_p.len() && batch.len() == noises.len(), "batch, pseudo labels and noise must align");
    ensure!(!batch.is_empty(), "empty batch");
    let mut total = theta.zeros_like();
    for i in id_order(batch) {
        let g = cond_gradient(theta, batch[i], y_p[i], &noises[i], cfg)?;
        total.head.axpy(1.0, &g.head);
    }
    let mut next = theta.clone();
    next.head.axpy(-eta / batch.len() as f64, &total.head);
    Ok(next)
}

/// Objective terms and (when ground truth is available) CorLoc after one
/// outer round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub eta: f64,
    pub cross: f64,
    pub self_cond: f64,
    pub self_pred: f64,
    pub disc: f64,
    pub pred_objective: f64,
    pub pseudo_boxes: f64,
    pub corloc: Option<f64>,
}

impl RoundMetrics {
    pub const HEADER: &'static str = "round,eta,cross,self_cond,self_pred,disc,pred_objective,pseudo_boxes,corloc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{}",
            self.round,
            self.eta,
            self.cross,
            self.self_cond,
            self.self_pred,
            self.disc,
            self.pred_objective,
            self.pseudo_boxes,
            self.corloc.map_or_else(|| "nan".into(), |c| format!("{c:.6}"))
        )
    }
}

/// Top-scoring detection of every class on every image; enough for CorLoc.
pub fn top_detections(theta: &PredParams, dataset: &[ImageSample]) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for s in dataset {
        let dist = pred_forward(theta, s)?;
        for class in 1..dist.num_labels {
            let best = (0..dist.num_boxes()).max_by(|&a, &b| {
                dist.prob(a, class).partial_cmp(&dist.prob(b, class)).unwrap_or(Ordering::Equal).then(b.cmp(&a))
            });
            if let Some(i) = best {
                dets.push(Detection {
                    image_id: s.id,
                    index: i,
                    class,
                    geometry: dist.decoded_box(i, class),
                    score: dist.prob(i, class),
                });
            }
        }
    }
    Ok(dets)
}

pub fn training_corloc(theta: &PredParams, dataset: &[ImageSample]) -> Result<Option<f64>> {
    let gts = ground_truth_boxes(dataset);
    if gts.is_empty() {
        return Ok(None);
    }
    let dets = top_detections(theta, dataset)?;
    Ok(corloc(&dets, &gts, theta.num_classes(), DEFAULT_MATCH_IOU).mean)
}

/// Owns both heads and the weakly labeled training set; each call to
/// [`Trainer::step_round`] runs one outer round. Every random draw is keyed
/// by `(seed, round, epoch, image id, k)`, so a trainer rebuilt from a
/// checkpoint continues exactly as an uninterrupted run would.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    data: Vec<ImageSample>,
    monitor: Vec<ImageSample>,
    pub pred: PredParams,
    pub cond: CondParams,
    pub rounds_done: usize,
}

/// Initial parameters for a configuration and data shape.
pub fn init_params(cfg: &TrainConfig, num_classes: usize, feature_dim: usize) -> (PredParams, CondParams) {
    let pred = PredParams::init(num_classes, feature_dim, cfg.hidden_units, &mut keyed(cfg.seed, Stream::Init, &[0]));
    let mut cond = CondParams::init(
        num_classes,
        feature_dim,
        cfg.noise_dim,
        cfg.hidden_units,
        &mut keyed(cfg.seed, Stream::Init, &[1]),
    );
    if cfg.variant.pointwise_cond() {
        cond.sever_noise();
    }
    (pred, cond)
}

fn dataset_shape(dataset: &[ImageSample]) -> Result<(usize, usize)> {
    ensure!(!dataset.is_empty(), "training set is empty");
    let c = dataset[0].annotation.num_classes();
    let d = dataset[0].feature_dim().unwrap_or(0);
    ensure!(c >= 1 && d >= 1, "training images need classes and features");
    for s in dataset {
        s.validate()?;
        s.annotation.check_classes(c)?;
        ensure!(s.feature_dim() == Some(d), "image {} has a different feature dimension", s.id);
    }
    Ok((c, d))
}

impl Trainer {
    /// Ground truth, if present, is split off and only used for CorLoc.
    pub fn new(dataset: &[ImageSample], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = dataset_shape(dataset)?;
        let (pred, cond) = init_params(&cfg, c, d);
        Self::resume(dataset, cfg, pred, cond, 0)
    }

    pub fn resume(
        dataset: &[ImageSample],
        cfg: TrainConfig,
        pred: PredParams,
        cond: CondParams,
        rounds_done: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = dataset_shape(dataset)?;
        ensure!(
            pred.num_classes() == c && pred.feature_dim() == d,
            "prediction head expects {} classes and {} features; data has {c} and {d}",
            pred.num_classes(),
            pred.feature_dim()
        );
        ensure!(
            cond.num_classes() == c && cond.feature_dim() == d && cond.noise_dim == cfg.noise_dim,
            "conditional head shape does not match data and config"
        );
        let monitor: Vec<ImageSample> = dataset.iter().filter(|s| s.ground_truth.is_some()).cloned().collect();
        let data = crate::synthdata::to_weak(dataset);
        Ok(Self { cfg, data, monitor, pred, cond, rounds_done })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_finished(&self) -> bool {
        self.rounds_done >= self.cfg.outer_rounds
    }

    fn shuffled(&self, round: usize, phase: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut keyed(self.cfg.seed, Stream::Shuffle, &[round as u64, phase, epoch as u64]));
        order
    }

    fn cond_phase(&mut self, round: usize, eta: f64) -> Result<()> {
        let y_p = self
            .data
            .iter()
            .map(|s| prediction_pseudo_labels(&self.pred, s, self.cfg.pseudo_labels))
            .collect::<Result<Vec<_>>>()?;
        for epoch in 0..self.cfg.inner_epochs {
            let order = self.shuffled(round, 0, epoch);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &self.data[i]).collect();
                let labels: Vec<&BoxLabeling> = chunk.iter().map(|&i| &y_p[i]).collect();
                let noises: Vec<Vec<NoiseVector>> = batch
                    .iter()
                    .map(|s| self.cfg.draw_noise(Stream::CondNoise, &[round as u64, epoch as u64, s.id]))
                    .collect();
                self.cond = cond_step(&self.cond, &batch, &labels, &noises, &self.cfg, eta)?;
            }
        }
        Ok(())
    }

    fn pseudo_ground_truth(&self, round: usize) -> Result<Vec<Vec<BoxLabeling>>> {
        self.data
            .iter()
            .map(|s| {
                let noises = self.cfg.draw_noise(Stream::PseudoNoise, &[round as u64, s.id]);
                let drawn = sample_conditional_with_noise(&self.cond, s, noises, self.cfg.sampler)?;
                postprocess_samples(
                    &drawn.labelings,
                    &drawn.scores,
                    &s.annotation,
                    self.cfg.score_threshold,
                    self.cfg.nms_iou,
                )
            })
            .collect()
    }

    fn pred_phase(&mut self, round: usize, eta: f64, pseudo: &[Vec<BoxLabeling>]) -> Result<()> {
        for epoch in 0..self.cfg.inner_epochs {
            let order = self.shuffled(round, 1, epoch);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &self.data[i]).collect();
                let sets: Vec<&[BoxLabeling]> = chunk.iter().map(|&i| pseudo[i].as_slice()).collect();
                self.pred = pred_step(&self.pred, &batch, &sets, &self.cfg, eta)?.0;
            }
        }
        Ok(())
    }

    /// Mean objective terms of the current heads against `pseudo`.
    fn objective(&self, pseudo: &[Vec<BoxLabeling>]) -> Result<(f64, f64, f64, f64, f64)> {
        let dcfg = self.cfg.disc();
        let (mut cross, mut sc, mut sp, mut dv, mut boxes) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (s, set) in self.data.iter().zip(pseudo) {
            let dist = pred_forward(&self.pred, s)?;
            let r = disc(&dist, set, &dcfg)?;
            cross += r.cross;
            sc += r.self_cond;
            sp += r.self_pred;
            dv += r.disc;
            boxes += set.iter().map(|y| y.foreground_count() as f64).sum::<f64>() / set.len() as f64;
        }
        let n = self.data.len() as f64;
        Ok((cross / n, sc / n, sp / n, dv / n, boxes / n))
    }

    /// Conditional update against fixed prediction pseudo labels, then the
    /// prediction update against freshly post-processed conditional samples.
    pub fn step_round(&mut self) -> Result<RoundMetrics> {
        let round = self.rounds_done;
        let eta = self.cfg.eta_at(round);
        self.cond_phase(round, eta)?;
        let pseudo = self.pseudo_ground_truth(round)?;
        self.pred_phase(round, eta, &pseudo)?;
        self.rounds_done += 1;
        let (cross, self_cond, self_pred, disc_value, pseudo_boxes) = self.objective(&pseudo)?;
        Ok(RoundMetrics {
            round: self.rounds_done,
            eta,
            cross,
            self_cond,
            self_pred,
            disc: disc_value,
            pred_objective: cross - self.cfg.pred_self_weight() * self_pred,
            pseudo_boxes,
            corloc: if self.monitor.is_empty() { None } else { training_corloc(&self.pred, &self.monitor)? },
        })
    }
}

/// Final heads and the per-round metric trajectory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pred: PredParams,
    pub cond: CondParams,
    pub rounds: Vec<RoundMetrics>,
}

pub fn coordinate_descent(dataset: &[ImageSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    let mut rounds = Vec::with_capacity(cfg.outer_rounds);
    while !trainer.is_finished() {
        rounds.push(trainer.step_round()?);
    }
    Ok(TrainOutcome { pred: trainer.pred, cond: trainer.cond, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Head;
    use crate::synthdata::{generate_dataset, SceneConfig};
    use crate::types::{BoxGeometry, Proposal};

    fn strip_image(features: Vec<Vec<f64>>, classes: &[usize], num_classes: usize) -> ImageSample {
        let proposals = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| Proposal {
                index: i,
                geometry: BoxGeometry::new(20.0 * i as f64 + 5.0, 5.0, 8.0, 8.0).unwrap(),
                features: f,
            })
            .collect();
        ImageSample {
            id: 7,
            proposals,
            annotation: ImageAnnotation::from_classes(num_classes, classes).unwrap(),
            ground_truth: None,
        }
    }

    fn small_data() -> Vec<ImageSample> {
        let cfg = SceneConfig { num_proposals: 12, ..SceneConfig::default() };
        generate_dataset(&cfg, 12).unwrap()
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig { k: 1, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "k"));
        let bad = TrainConfig { epsilon: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "epsilon"));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn severed_noise_gives_identical_samples() {
        let data = small_data();
        let cfg = TrainConfig::default();
        let (_, mut cond) = init_params(&cfg, 3, 16);
        cond.sever_noise();
        let mut rng = keyed(3, Stream::CondNoise, &[]);
        let drawn = sample_conditional(&cond, &data[0], 5, SamplerMode::Exact, &mut rng).unwrap();
        assert!(drawn.labelings.windows(2).all(|w| w[0] == w[1]));
        assert!(drawn.noises.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn samples_are_compatible_and_seeded() {
        let data = small_data();
        let cfg = TrainConfig::default();
        let (_, cond) = init_params(&cfg, 3, 16);
        for s in &data {
            let a =
                sample_conditional(&cond, s, 5, SamplerMode::Exact, &mut keyed(1, Stream::CondNoise, &[s.id])).unwrap();
            let b =
                sample_conditional(&cond, s, 5, SamplerMode::Exact, &mut keyed(1, Stream::CondNoise, &[s.id])).unwrap();
            assert_eq!(a, b);
            for y in &a.labelings {
                assert!(is_compatible(y, &s.annotation).unwrap());
            }
        }
    }

    fn scored(rows: &[Vec<f64>], s: &ImageSample) -> ScoreMatrix {
        ScoreMatrix::from_rows(rows, s.anchors()).unwrap()
    }

    #[test]
    fn postprocess_noop_settings_are_identity() {
        let s = strip_image(vec![vec![0.0]; 3], &[1, 2], 2);
        let g = scored(&[vec![0.0, 2.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 1.0]], &s);
        let y = g.labeling(vec![1, 1, 2]);
        let out = postprocess_samples(std::slice::from_ref(&y), &[g], &s.annotation, 0.0, 1.0).unwrap();
        assert_eq!(out, vec![y]);
    }

    #[test]
    fn postprocess_suppresses_overlaps() {
        let mut s = strip_image(vec![vec![0.0]; 3], &[1], 1);
        // Proposals 0 and 1 overlap at IoU 0.9.
        s.proposals[0].geometry = BoxGeometry::from_corners(0.0, 0.0, 10.0, 10.0).unwrap();
        s.proposals[1].geometry = BoxGeometry::from_corners(0.0, 0.0, 10.0, 9.0).unwrap();
        assert!((iou(&s.proposals[0].geometry, &s.proposals[1].geometry) - 0.9).abs() < 1e-12);
        let g = scored(&[vec![0.0, 2.0], vec![0.0, 3.0], vec![1.0, 0.0]], &s);
        let y = g.labeling(vec![1, 1, 0]);
        let out = postprocess_samples(&[y], &[g], &s.annotation, 0.0, 0.3).unwrap();
        assert_eq!(out[0].classes, vec![0, 1, 0]);
    }

    #[test]
    fn postprocess_falls_back_to_best_box() {
        let s = strip_image(vec![vec![0.0]; 3], &[1], 1);
        let g = scored(&[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 0.0]], &s);
        let y = g.labeling(vec![1, 1, 1]);
        let out = postprocess_samples(&[y], &[g], &s.annotation, 0.5, 0.3).unwrap();
        assert_eq!(out[0].classes, vec![0, 1, 0]);
    }

    #[test]
    fn postprocess_drops_absent_classes() {
        let s = strip_image(vec![vec![0.0]; 3], &[1], 2);
        let g = scored(&[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0], vec![1.0, 0.0, 0.0]], &s);
        let y = g.labeling(vec![1, 2, 0]);
        let out = postprocess_samples(&[y], &[g], &s.annotation, 0.0, 0.3).unwrap();
        assert_eq!(out[0].classes, vec![1, 0, 0]);
        assert!(is_compatible(&out[0], &s.annotation).unwrap());
    }

    #[test]
    fn zero_step_size_keeps_parameters() {
        let data = to_weak_small();
        let cfg = TrainConfig::default();
        let (pred, cond) = init_params(&cfg, 3, 16);
        let y: Vec<Vec<BoxLabeling>> = data
            .iter()
            .map(|s| {
                let d =
                    sample_conditional(&cond, s, 2, SamplerMode::Exact, &mut keyed(0, Stream::PseudoNoise, &[s.id]))
                        .unwrap();
                d.labelings
            })
            .collect();
        let batch: Vec<&ImageSample> = data.iter().collect();
        let sets: Vec<&[BoxLabeling]> = y.iter().map(|v| v.as_slice()).collect();
        let (next, _) = pred_step(&pred, &batch, &sets, &cfg, 0.0).unwrap();
        assert_eq!(next, pred);
    }

    fn to_weak_small() -> Vec<ImageSample> {
        crate::synthdata::to_weak(&small_data())
    }

    #[test]
    fn pred_step_decreases_objective_on_separable_toy() {
        // Class 1 lives on feature +1, background on -1.
        let s = strip_image(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]], &[1], 1);
        let y = BoxLabeling::on_anchors(vec![1, 0, 1], &s.anchors()).unwrap();
        let cfg = TrainConfig::default();
        let theta = PredParams { head: Head::zeros(2, 2, 0) };
        let sets = vec![y.clone(), y];
        let (next, before) = pred_step(&theta, &[&s], &[&sets], &cfg, 0.5).unwrap();
        let (after, _) = pred_objective_grad_weighted(&next, &s, &sets, &cfg.loss(), 1.0 - cfg.gamma).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn batch_order_does_not_change_updates() {
        let data = to_weak_small();
        let cfg = TrainConfig::default();
        let (pred, cond) = init_params(&cfg, 3, 16);
        let y_p: Vec<BoxLabeling> =
            data.iter().map(|s| prediction_pseudo_labels(&pred, s, PseudoLabels::Map).unwrap()).collect();
        let noises: Vec<Vec<NoiseVector>> = data.iter().map(|s| cfg.draw_noise(Stream::CondNoise, &[s.id])).collect();
        let fwd: Vec<usize> = (0..data.len()).collect();
        let rev: Vec<usize> = fwd.iter().rev().copied().collect();
        let run = |order: &[usize]| {
            let batch: Vec<&ImageSample> = order.iter().map(|&i| &data[i]).collect();
            let labels: Vec<&BoxLabeling> = order.iter().map(|&i| &y_p[i]).collect();
            let nz: Vec<Vec<NoiseVector>> = order.iter().map(|&i| noises[i].clone()).collect();
            cond_step(&cond, &batch, &labels, &nz, &cfg, 0.1).unwrap()
        };
        assert_eq!(run(&fwd), run(&rev));
    }

    #[test]
    fn fixed_point_gradient_is_exactly_zero() {
        // Two proposals, one class; the conditional head prefers (1, 0) by a
        // wide margin regardless of noise, and the pseudo labels agree.
        let s = strip_image(vec![vec![1.0], vec![-1.0]], &[1], 1);
        let mut cond = CondParams { head: Head::zeros(2, 1 + 2, 0), noise_dim: 2 };
        let l = cond.head.layout();
        cond.head.params[l.class_w + 3] = 5.0; // class 1 weight on the feature
        let y_p = BoxLabeling::on_anchors(vec![1, 0], &s.anchors()).unwrap();
        let cfg = TrainConfig { k: 3, noise_dim: 2, ..TrainConfig::default() };
        let noises = cfg.draw_noise(Stream::CondNoise, &[0]);
        let drawn = sample_conditional_with_noise(&cond, &s, noises.clone(), cfg.sampler).unwrap();
        assert!(drawn.labelings.iter().all(|y| *y == y_p));
        let g = cond_gradient(&cond, &s, &y_p, &noises, &cfg).unwrap();
        assert!(g.head.params.iter().all(|&v| v == 0.0));
        let next = cond_step(&cond, &[&s], &[&y_p], &[noises], &cfg, 0.5).unwrap();
        assert_eq!(next, cond);
    }

    #[test]
    fn hand_computed_conditional_update() {
        // B=2, C=1, lambda=0. G[i][1] = f_i + 4z - 2, G[i][0] = 0.
        // z=0.125: both rows prefer 0, the constraint forces box 0: (1, 0).
        // z=0.8125: G = (2.25, 0.25), so (1, 1).
        // Against y_p = (1, 1) with epsilon/B = 0.5 per mismatch:
        //   y_a = (1, 0) for both draws, so only draw 2 moves (box 1, 0 vs 1).
        //   y_b(1 vs c2) = (1, 0), y_b(2 vs c1) = (1, 1).
        let s = strip_image(vec![vec![1.0], vec![-1.0]], &[1], 1);
        let mut cond = CondParams { head: Head::zeros(2, 2, 0), noise_dim: 1 };
        let l = cond.head.layout();
        cond.head.params[l.class_w + 2] = 1.0;
        cond.head.params[l.class_w + 3] = 4.0;
        cond.head.params[l.class_b + 1] = -2.0;
        let cfg = TrainConfig { k: 2, noise_dim: 1, lambda: 0.0, gamma: 0.5, epsilon: 1.0, ..TrainConfig::default() };
        let noises = vec![NoiseVector { z: vec![0.125] }, NoiseVector { z: vec![0.8125] }];
        let y_p = BoxLabeling::on_anchors(vec![1, 1], &s.anchors()).unwrap();
        let drawn = sample_conditional_with_noise(&cond, &s, noises.clone(), cfg.sampler).unwrap();
        assert_eq!(drawn.labelings[0].classes, vec![1, 0]);
        assert_eq!(drawn.labelings[1].classes, vec![1, 1]);

        // cross: 1/(KB) = 1/4 times (e0 - e1) at x = (-1, 0.8125)
        // self:  -gamma * 2/(K(K-1)B) = -1/4 times
        //        (e0 - e1) at (-1, 0.125) plus (e1 - e0) at (-1, 0.8125)
        // => d/d(w_0, b_0) = 1/4 * [(-1, .8125, 1) - (-1, .125, 1) + (-1, .8125, 1)]
        let g = cond_gradient(&cond, &s, &y_p, &noises, &cfg).unwrap();
        let expect_0 = [-0.25, 0.375, 0.25];
        assert_eq!(&g.head.params[l.class_w..l.class_w + 2], &expect_0[..2]);
        assert_eq!(g.head.params[l.class_b], expect_0[2]);
        assert_eq!(g.head.params[l.class_w + 2..l.class_w + 4], [0.25, -0.375]);
        assert_eq!(g.head.params[l.class_b + 1], -0.25);
        assert!(g.head.params[l.offset_w..].iter().all(|&v| v == 0.0));

        let next = cond_step(&cond, &[&s], &[&y_p], &[noises], &cfg, 2.0).unwrap();
        assert_eq!(next.head.params[l.class_w + 3], 4.0 + 0.75);
    }

    #[test]
    fn zero_gamma_uses_only_the_cross_term() {
        let data = to_weak_small();
        let cfg0 = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
        let (pred, cond) = init_params(&cfg0, 3, 16);
        let s = &data[0];
        let y_p = prediction_pseudo_labels(&pred, s, PseudoLabels::Map).unwrap();
        let noises = cfg0.draw_noise(Stream::CondNoise, &[1]);
        let full = cond_gradient(&cond, s, &y_p, &noises, &cfg0).unwrap();
        // Cross term alone, assembled directly.
        let drawn = sample_conditional_with_noise(&cond, s, noises.clone(), cfg0.sampler).unwrap();
        let mut manual = cond.zeros_like();
        let kb = (noises.len() * s.num_proposals()) as f64;
        for (k, z) in noises.iter().enumerate() {
            let ya = loss_augmented_argmax_with(&drawn.scores[k], &s.annotation, &y_p, 1.0, &cfg0.loss(), cfg0.sampler)
                .unwrap();
            accumulate_score_diff(&cond, s, z, &ya.classes, Some(&drawn.labelings[k].classes), 1.0 / kb, &mut manual)
                .unwrap();
            accumulate_regression(
                &cond,
                s,
                z,
                &drawn.labelings[k],
                &y_p,
                cfg0.lambda,
                1.0 / noises.len() as f64,
                &mut manual,
            )
            .unwrap();
        }
        assert_eq!(full, manual);
    }

    #[test]
    fn pointwise_conditional_draws_one_zero_sample() {
        let cfg = TrainConfig { variant: Variant::PwCond, ..TrainConfig::default() };
        let noises = cfg.draw_noise(Stream::CondNoise, &[0, 0, 0]);
        assert_eq!(noises, vec![NoiseVector::zeros(cfg.noise_dim)]);
        assert_eq!(cfg.samples_per_image(), 1);
    }

    #[test]
    fn zero_rounds_return_initial_parameters() {
        let data = small_data();
        let cfg = TrainConfig { outer_rounds: 0, ..TrainConfig::default() };
        let out = coordinate_descent(&data, &cfg).unwrap();
        let (pred, cond) = init_params(&cfg, 3, 16);
        assert_eq!(out.pred, pred);
        assert_eq!(out.cond, cond);
        assert!(out.rounds.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = small_data();
        let cfg = TrainConfig { outer_rounds: 3, inner_epochs: 1, ..TrainConfig::default() };
        let a = coordinate_descent(&data, &cfg).unwrap();
        let b = coordinate_descent(&data, &cfg).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.pred, b.pred);

        let mut t = Trainer::new(&data, cfg.clone()).unwrap();
        t.step_round().unwrap();
        let mut resumed = Trainer::resume(&data, cfg, t.pred.clone(), t.cond.clone(), 1).unwrap();
        while !resumed.is_finished() {
            resumed.step_round().unwrap();
        }
        assert_eq!(resumed.pred, a.pred);
        assert_eq!(resumed.cond, a.cond);
        assert!(a.rounds.iter().all(|r| r.corloc.is_some()));
    }
}
