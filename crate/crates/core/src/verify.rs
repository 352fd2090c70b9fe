//! Oracle suites: each check compares a production routine against an
//! independent construction (exhaustive search, finite differences,
//! Monte-Carlo sampling, prefix-wise precision/recall) on random instances.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diversity::{div_cond_cond, div_pred_pred, DiscConfig};
use crate::error::Result;
use crate::evalmetrics::{average_precision, iou, Detection, GtBox};
use crate::loss::delta_box_in;
use crate::models::{
    cond_forward, cond_score_grad, pred_forward, pred_objective_grad, CondParams, Head, NoiseVector, PredParams,
};
use crate::rng::{keyed, Stream};
use crate::sampler::{brute_force_argmax, constrained_argmax, joint_score};
use crate::trainer::{cond_gradient, sample_conditional_with_noise, TrainConfig};
use crate::types::{BoxGeometry, BoxLabeling, ImageAnnotation, ImageSample, Proposal, ScoreMatrix};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Negates every analytic gradient before comparison; the gradient
    /// checks must then fail.
    pub flip_gradient_sign: bool,
    pub sampler_instances: usize,
    pub gradient_instances: usize,
    pub cond_mc_draws: usize,
    pub pred_mc_draws: usize,
    pub ap_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            flip_gradient_sign: false,
            sampler_instances: 1000,
            gradient_instances: 100,
            cond_mc_draws: 10_000,
            pred_mc_draws: 100_000,
            ap_instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    pub const HEADER: &'static str = "check,instances,max_error,tolerance,status";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3e},{:.1e},{}",
            self.name,
            self.instances,
            self.max_error,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

pub fn report_csv(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", CheckResult::HEADER);
    for r in results {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

fn rng(opts: &VerifyOptions, check: u64) -> ChaCha8Rng {
    keyed(opts.seed, Stream::Verify, &[check])
}

fn random_box<R: Rng>(rng: &mut R) -> BoxGeometry {
    let cx = rng.random_range(5.0..95.0);
    let cy = rng.random_range(5.0..95.0);
    BoxGeometry::new(cx, cy, rng.random_range(4.0..40.0), rng.random_range(4.0..40.0)).expect("positive size")
}

/// A box near `frame`, so localization residuals stay in a moderate range.
fn nearby_box<R: Rng>(rng: &mut R, frame: &BoxGeometry) -> BoxGeometry {
    let dx = rng.random_range(-0.3..0.3) * frame.w;
    let dy = rng.random_range(-0.3..0.3) * frame.h;
    let sw = rng.random_range(0.6f64..1.6);
    let sh = rng.random_range(0.6f64..1.6);
    BoxGeometry::new(frame.cx + dx, frame.cy + dy, frame.w * sw, frame.h * sh).expect("positive size")
}

fn random_annotation<R: Rng>(rng: &mut R, c: usize) -> ImageAnnotation {
    ImageAnnotation::new((0..c).map(|_| rng.random_bool(0.5)).collect())
}

fn random_image<R: Rng>(rng: &mut R, b: usize, c: usize, d: usize) -> ImageSample {
    let proposals = (0..b)
        .map(|index| Proposal {
            index,
            geometry: random_box(rng),
            features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let mut annotation = random_annotation(rng, c);
    if annotation.num_required() > b {
        annotation = ImageAnnotation::new(vec![false; c]);
    }
    ImageSample { id: 0, proposals, annotation, ground_truth: None }
}

fn random_head<R: Rng>(rng: &mut R, labels: usize, in_dim: usize, hidden: usize, scale: f64) -> Head {
    let n = Head::param_count(labels, in_dim, hidden);
    let params = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Head::from_params(labels, in_dim, hidden, params).expect("matching length")
}

/// Exact sampler against exhaustive search on instances with `B <= 6`,
/// `C <= 3` and scores uniform on `[-5, 5]`.
pub fn check_sampler(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng(opts, 1);
    let mut max_error: f64 = 0.0;
    let mut mismatches = 0usize;
    for _ in 0..opts.sampler_instances {
        let b = rng.random_range(1..=6);
        let c = rng.random_range(1..=3);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| (0..=c).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let g = ScoreMatrix::from_rows_unit(&rows)?;
        let a = random_annotation(&mut rng, c);
        match (constrained_argmax(&g, &a), brute_force_argmax(&g, &a)) {
            (Ok(fast), Ok(slow)) => {
                let sf = joint_score(&g, &fast, &a)?.value().unwrap_or(f64::NAN);
                let ss = joint_score(&g, &slow, &a)?.value().unwrap_or(f64::NAN);
                let err = (sf - ss).abs();
                max_error = max_error.max(if err.is_nan() { f64::INFINITY } else { err });
                if fast.classes != slow.classes {
                    mismatches += 1;
                }
            }
            (Err(_), Err(_)) => {}
            _ => mismatches += 1,
        }
    }
    Ok(CheckResult {
        name: "sampler_exactness",
        instances: opts.sampler_instances,
        max_error,
        tolerance: 0.0,
        passed: max_error == 0.0 && mismatches == 0,
    })
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for j in 0..p.len() {
        let orig = p[j];
        p[j] = orig + FD_STEP;
        let up = f(&p)?;
        p[j] = orig - FD_STEP;
        let down = f(&p)?;
        p[j] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Gradient of the prediction objective (cross diversity minus weighted
/// self-diversity) against central differences.
pub fn check_pred_gradient(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng(opts, 2);
    let sign = if opts.flip_gradient_sign { -1.0 } else { 1.0 };
    let mut max_error: f64 = 0.0;
    for inst in 0..opts.gradient_instances {
        let b = rng.random_range(1..=5);
        let c = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let hidden = if inst % 2 == 0 { 0 } else { 3 };
        let sample = random_image(&mut rng, b, c, d);
        let theta = PredParams { head: random_head(&mut rng, c + 1, d, hidden, 0.5) };
        let k = rng.random_range(1..=3);
        let samples: Vec<BoxLabeling> = (0..k)
            .map(|_| {
                let classes = (0..b).map(|_| rng.random_range(0..=c)).collect();
                let boxes = sample.proposals.iter().map(|p| nearby_box(&mut rng, &p.geometry)).collect();
                BoxLabeling::new(classes, boxes).expect("aligned")
            })
            .collect();
        let cfg = DiscConfig::new(rng.random_range(0.0..1.0), rng.random_range(0.1..3.0))?;
        let (_, grad) = pred_objective_grad(&theta, &sample, &samples, &cfg)?;
        let analytic: Vec<f64> = grad.head.params.iter().map(|g| sign * g).collect();
        let numeric = central_difference(&theta.head.params, |p| {
            let t = PredParams { head: Head::from_params(c + 1, d, hidden, p.to_vec())? };
            Ok(pred_objective_grad(&t, &sample, &samples, &cfg)?.0)
        })?;
        max_error = max_error.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        name: "pred_objective_gradient",
        instances: opts.gradient_instances,
        max_error,
        tolerance: FD_TOLERANCE,
        passed: max_error < FD_TOLERANCE,
    })
}

/// Gradient of the conditional joint score `S(y) = sum_i G[i][y_i]`
/// against central differences.
pub fn check_cond_gradient(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng(opts, 3);
    let sign = if opts.flip_gradient_sign { -1.0 } else { 1.0 };
    let mut max_error: f64 = 0.0;
    for inst in 0..opts.gradient_instances {
        let b = rng.random_range(1..=5);
        let c = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let nd = rng.random_range(1..=4);
        let hidden = if inst % 2 == 0 { 0 } else { 3 };
        let sample = random_image(&mut rng, b, c, d);
        let theta = CondParams { head: random_head(&mut rng, c + 1, d + nd, hidden, 0.5), noise_dim: nd };
        let z = NoiseVector::sample(nd, &mut rng);
        let classes: Vec<usize> = (0..b).map(|_| rng.random_range(0..=c)).collect();
        let y = BoxLabeling::on_anchors(classes.clone(), &sample.anchors())?;
        let grad = cond_score_grad(&theta, &sample, &z, &y)?;
        let analytic: Vec<f64> = grad.head.params.iter().map(|g| sign * g).collect();
        let numeric = central_difference(&theta.head.params, |p| {
            let t = CondParams { head: Head::from_params(c + 1, d + nd, hidden, p.to_vec())?, noise_dim: nd };
            let g = cond_forward(&t, &sample, &z)?;
            Ok(classes.iter().enumerate().map(|(i, &ci)| g.score(i, ci)).sum())
        })?;
        max_error = max_error.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckResult {
        name: "cond_score_gradient",
        instances: opts.gradient_instances,
        max_error,
        tolerance: FD_TOLERANCE,
        passed: max_error < FD_TOLERANCE,
    })
}

/// Pairwise conditional self-diversity with an enumerable noise-to-labeling
/// map: the Monte-Carlo mean of the `K`-sample estimate converges to the
/// exact expectation over the map's labelings.
pub fn check_cond_diversity(opts: &VerifyOptions) -> Result<CheckResult> {
    const INSTANCES: usize = 5;
    const K: usize = 5;
    let mut rng = rng(opts, 4);
    let mut max_error: f64 = 0.0;
    for _ in 0..INSTANCES {
        let b = rng.random_range(1..=4);
        let c = rng.random_range(1..=3);
        let frames: Vec<BoxGeometry> = (0..b).map(|_| random_box(&mut rng)).collect();
        let m = rng.random_range(2..=5);
        let table: Vec<BoxLabeling> = (0..m)
            .map(|_| {
                let classes = (0..b).map(|_| rng.random_range(0..=c)).collect();
                let boxes = frames.iter().map(|f| nearby_box(&mut rng, f)).collect();
                BoxLabeling::new(classes, boxes).expect("aligned")
            })
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let cfg = DiscConfig::new(0.5, rng.random_range(0.1..3.0))?;

        // The map reads only the first noise coordinate.
        let lookup = |z: &NoiseVector| {
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if z.z[0] < acc {
                    return i;
                }
            }
            m - 1
        };
        let mut exact = 0.0;
        for a in 0..m {
            for bb in 0..m {
                if a != bb {
                    exact +=
                        probs[a] * probs[bb] * div_cond_cond(&[table[a].clone(), table[bb].clone()], &frames, &cfg)?;
                }
            }
        }
        let mut mean = 0.0;
        for _ in 0..opts.cond_mc_draws {
            let draw: Vec<BoxLabeling> =
                (0..K).map(|_| table[lookup(&NoiseVector::sample(4, &mut rng))].clone()).collect();
            mean += div_cond_cond(&draw, &frames, &cfg)?;
        }
        mean /= opts.cond_mc_draws as f64;
        max_error = max_error.max((mean - exact).abs());
    }
    Ok(CheckResult {
        name: "cond_self_diversity_mc",
        instances: INSTANCES,
        max_error,
        tolerance: 1e-2,
        passed: max_error < 1e-2,
    })
}

/// Closed-form prediction self-diversity against pairs of independent
/// labelings drawn from the factorized distribution. The error is reported
/// in standard errors.
pub fn check_pred_diversity(opts: &VerifyOptions) -> Result<CheckResult> {
    const INSTANCES: usize = 3;
    let mut rng = rng(opts, 5);
    let mut max_error: f64 = 0.0;
    for _ in 0..INSTANCES {
        let b = rng.random_range(1..=4);
        let c = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let sample = random_image(&mut rng, b, c, d);
        let theta = PredParams { head: random_head(&mut rng, c + 1, d, 0, 1.0) };
        let dist = pred_forward(&theta, &sample)?;
        let cfg = DiscConfig::new(0.5, rng.random_range(0.1..3.0))?;
        let closed = div_pred_pred(&dist, &cfg)?;

        let draw_label = |rng: &mut ChaCha8Rng, i: usize| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for l in 0..dist.num_labels {
                acc += dist.prob(i, l);
                if u < acc {
                    return l;
                }
            }
            dist.num_labels - 1
        };
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..opts.pred_mc_draws {
            let mut v = 0.0;
            for i in 0..b {
                let (c1, c2) = (draw_label(&mut rng, i), draw_label(&mut rng, i));
                v += delta_box_in(
                    (c1, &dist.decoded_box(i, c1)),
                    (c2, &dist.decoded_box(i, c2)),
                    &dist.anchors[i],
                    &cfg.loss,
                );
            }
            v /= b as f64;
            sum += v;
            sum_sq += v * v;
        }
        let n = opts.pred_mc_draws as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt().max(1e-12);
        max_error = max_error.max((mean - closed).abs() / se);
    }
    Ok(CheckResult {
        name: "pred_self_diversity_mc",
        instances: INSTANCES,
        max_error,
        tolerance: 3.0,
        passed: max_error <= 3.0,
    })
}

/// Average precision by prefix-wise precision/recall: for every cutoff the
/// true positives are recounted from scratch on the top-ranked detections.
pub fn brute_force_average_precision(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then(a.image_id.cmp(&b.image_id)).then(a.index.cmp(&b.index))
    });
    let tp_at = |cut: usize| {
        let mut used = vec![false; gts.len()];
        let mut tp = 0usize;
        for d in &order[..cut] {
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
            if let Some((g, _)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        tp
    };
    let tps: Vec<usize> = (0..=order.len()).map(tp_at).collect();
    let precision: Vec<f64> = (1..=order.len()).map(|k| tps[k] as f64 / k as f64).collect();
    let n_gt = gts.len() as f64;
    let mut ap = 0.0;
    for k in 1..=order.len() {
        let gained = (tps[k] - tps[k - 1]) as f64 / n_gt;
        if gained > 0.0 {
            let envelope = precision[k - 1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ap += gained * envelope;
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxGeometry {
    BoxGeometry::from_corners(x1, y1, x2, y2).expect("valid corners")
}

/// Three detections against two ground-truth boxes: hit, miss, hit.
pub fn hand_example_ap() -> Option<f64> {
    let g1 = corner(0.0, 0.0, 10.0, 10.0);
    let g2 = corner(20.0, 20.0, 30.0, 30.0);
    let det = |index, geometry, score| Detection { image_id: 0, index, class: 1, geometry, score };
    let dets = [det(0, g1, 0.9), det(1, corner(50.0, 50.0, 60.0, 60.0), 0.8), det(2, g2, 0.7)];
    let gts = [GtBox { image_id: 0, class: 1, geometry: g1 }, GtBox { image_id: 0, class: 1, geometry: g2 }];
    average_precision(&dets, &gts, 0.5)
}

/// Production AP against [`brute_force_average_precision`] on random
/// mini-sets with tied scores and overlapping boxes, plus the hand example.
pub fn check_average_precision(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng(opts, 6);
    let mut max_error: f64 = 0.0;
    let mut mismatches = 0usize;
    let grid_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..4) as f64 * 2.0;
        let y = rng.random_range(0..4) as f64 * 2.0;
        corner(x, y, x + rng.random_range(2..=4) as f64, y + rng.random_range(2..=4) as f64)
    };
    for _ in 0..opts.ap_instances {
        let images = rng.random_range(1..=3u64);
        let gts: Vec<GtBox> = (0..rng.random_range(0..=5))
            .map(|_| GtBox { image_id: rng.random_range(0..images), class: 1, geometry: grid_box(&mut rng) })
            .collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=8))
            .map(|index| Detection {
                image_id: rng.random_range(0..images),
                index,
                class: 1,
                geometry: grid_box(&mut rng),
                score: rng.random_range(1..=5) as f64 / 10.0,
            })
            .collect();
        match (average_precision(&dets, &gts, 0.5), brute_force_average_precision(&dets, &gts, 0.5)) {
            (Some(a), Some(b)) => {
                max_error = max_error.max((a - b).abs());
                if a != b {
                    mismatches += 1;
                }
            }
            (None, None) => {}
            _ => mismatches += 1,
        }
    }
    // 5/6 is not representable; the computed sum lands within an ulp.
    let hand_ok = hand_example_ap().is_some_and(|ap| (ap - 5.0 / 6.0).abs() <= 1e-15);
    Ok(CheckResult {
        name: "average_precision_oracle",
        instances: opts.ap_instances,
        max_error,
        tolerance: 0.0,
        passed: mismatches == 0 && hand_ok,
    })
}

/// The conditional update is exactly zero when every sample equals the
/// pseudo labels: each proposal is one-hot encoded and its target label
/// wins by a margin no loss augmentation can overturn.
pub fn check_fixed_point(opts: &VerifyOptions) -> Result<CheckResult> {
    const INSTANCES: usize = 100;
    let mut rng = rng(opts, 7);
    let mut max_error: f64 = 0.0;
    for inst in 0..INSTANCES {
        let b = rng.random_range(2..=6);
        let c = rng.random_range(1..=3);
        let nd = 4;
        let mut annotation = random_annotation(&mut rng, c);
        if annotation.num_required() == 0 {
            annotation = ImageAnnotation::new((0..c).map(|j| j == 0).collect());
        }
        let mut classes = vec![0usize; b];
        let req: Vec<usize> = annotation.required().collect();
        for (slot, &j) in req.iter().enumerate() {
            classes[slot] = j;
        }
        for ci in classes.iter_mut().skip(req.len()) {
            let pick = rng.random_range(0..=req.len());
            *ci = if pick == 0 { 0 } else { req[pick - 1] };
        }
        let proposals = (0..b)
            .map(|i| Proposal {
                index: i,
                geometry: random_box(&mut rng),
                features: (0..b).map(|k| if k == i { 1.0 } else { 0.0 }).collect(),
            })
            .collect();
        let sample = ImageSample { id: inst as u64, proposals, annotation, ground_truth: None };
        let mut head = random_head(&mut rng, c + 1, b + nd, 0, 0.01);
        let l = head.layout();
        // Offsets that read the noise would make the samples' boxes differ.
        head.params[l.offset_w..l.len].iter_mut().for_each(|v| *v = 0.0);
        for (i, &ci) in classes.iter().enumerate() {
            head.params[l.class_w + ci * (b + nd) + i] = 100.0;
        }
        let theta = CondParams { head, noise_dim: nd };
        let cfg = TrainConfig { k: 5, noise_dim: nd, ..TrainConfig::default() };
        let noises = cfg.draw_noise(Stream::Verify, &[opts.seed, 7, inst as u64]);
        let drawn = sample_conditional_with_noise(&theta, &sample, noises.clone(), cfg.sampler)?;
        let y_p = drawn.labelings[0].clone();
        let identical = drawn.labelings.iter().all(|y| *y == y_p) && y_p.classes == classes;
        let grad = cond_gradient(&theta, &sample, &y_p, &noises, &cfg)?;
        let worst = grad.head.params.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        max_error = max_error.max(if identical { worst } else { f64::INFINITY });
    }
    Ok(CheckResult {
        name: "cond_fixed_point",
        instances: INSTANCES,
        max_error,
        tolerance: 0.0,
        passed: max_error == 0.0,
    })
}

/// Every suite in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_sampler(opts)?,
        check_pred_gradient(opts)?,
        check_cond_gradient(opts)?,
        check_cond_diversity(opts)?,
        check_pred_diversity(opts)?,
        check_average_precision(opts)?,
        check_fixed_point(opts)?,
    ])
}
