//! The two scorers.
//!
//! Both heads map a per-proposal input vector to `C + 1` class logits and
//! `C + 1` four-component box offsets, either linearly or through one tanh
//! hidden layer. The prediction head reads proposal features and is
//! normalized with a softmax; the conditional head reads features
//! concatenated with a per-image noise vector and is left unnormalized.
//!
//! Gradients are written out by hand and checked against central finite
//! differences in the tests.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diversity::{div_pred_cond, div_pred_pred, DiscConfig};
use crate::error::{ensure, Error, Result};
use crate::loss::{encode_unchecked, smooth_l1_derivative, smooth_l1_unchecked, LossConfig};
use crate::types::{softmax, BoxLabeling, ClassDistribution, ImageSample, ScoreMatrix};

/// Half-width of the uniform initialization of output weights.
pub const INIT_SCALE: f64 = 0.01;
pub const DEFAULT_NOISE_DIM: usize = 4;

/// Parameters of one scoring head, stored flat:
/// `[hidden_w | hidden_b | class_w | class_b | offset_w | offset_b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub num_labels: usize,
    pub in_dim: usize,
    /// Width of the tanh hidden layer; zero for a linear head.
    pub hidden: usize,
    pub params: Vec<f64>,
}

/// Offsets of each parameter block inside [`Head::params`]. Weight blocks
/// are row-major with one row per output unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub hidden_w: usize,
    pub hidden_b: usize,
    pub class_w: usize,
    pub class_b: usize,
    pub offset_w: usize,
    pub offset_b: usize,
    pub len: usize,
}

impl Head {
    pub fn param_count(num_labels: usize, in_dim: usize, hidden: usize) -> usize {
        Self::layout_for(num_labels, in_dim, hidden).len
    }

    fn layout_for(num_labels: usize, in_dim: usize, hidden: usize) -> Layout {
        let feat = if hidden > 0 { hidden } else { in_dim };
        let hidden_w = 0;
        let hidden_b = hidden_w + hidden * in_dim;
        let class_w = hidden_b + hidden;
        let class_b = class_w + num_labels * feat;
        let offset_w = class_b + num_labels;
        let offset_b = offset_w + num_labels * 4 * feat;
        let len = offset_b + num_labels * 4;
        Layout { hidden_w, hidden_b, class_w, class_b, offset_w, offset_b, len }
    }

    pub fn layout(&self) -> Layout {
        Self::layout_for(self.num_labels, self.in_dim, self.hidden)
    }

    fn feat_dim(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.in_dim
        }
    }

    pub fn zeros(num_labels: usize, in_dim: usize, hidden: usize) -> Self {
        let len = Self::param_count(num_labels, in_dim, hidden);
        Self { num_labels, in_dim, hidden, params: vec![0.0; len] }
    }

    pub fn from_params(num_labels: usize, in_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let len = Self::param_count(num_labels, in_dim, hidden);
        ensure!(params.len() == len, "expected {len} parameters, got {}", params.len());
        Ok(Self { num_labels, in_dim, hidden, params })
    }

    /// Output weights uniform on `[-INIT_SCALE, INIT_SCALE]`, biases zero;
    /// hidden weights (if any) Glorot-uniform.
    pub fn init<R: Rng + ?Sized>(num_labels: usize, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut head = Self::zeros(num_labels, in_dim, hidden);
        let l = head.layout();
        if hidden > 0 {
            let limit = (6.0 / (in_dim + hidden) as f64).sqrt();
            let u = Uniform::new_inclusive(-limit, limit).expect("valid range");
            for w in &mut head.params[l.hidden_w..l.hidden_b] {
                *w = u.sample(rng);
            }
        }
        let u = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE).expect("valid range");
        for w in &mut head.params[l.class_w..l.class_b] {
            *w = u.sample(rng);
        }
        for w in &mut head.params[l.offset_w..l.offset_b] {
            *w = u.sample(rng);
        }
        head
    }

    pub fn same_shape(&self, other: &Head) -> bool {
        self.num_labels == other.num_labels && self.in_dim == other.in_dim && self.hidden == other.hidden
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_labels, self.in_dim, self.hidden)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Head) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.params {
            *a *= alpha;
        }
    }

    fn hidden_activations(&self, input: &[f64]) -> Vec<f64> {
        if self.hidden == 0 {
            return input.to_vec();
        }
        let l = self.layout();
        (0..self.hidden)
            .map(|u| {
                let w = &self.params[l.hidden_w + u * self.in_dim..l.hidden_w + (u + 1) * self.in_dim];
                let pre: f64 = w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + self.params[l.hidden_b + u];
                pre.tanh()
            })
            .collect()
    }

    /// Logits and offsets for one input vector.
    fn forward_one(&self, input: &[f64]) -> (Vec<f64>, Vec<[f64; 4]>, Vec<f64>) {
        let l = self.layout();
        let f = self.feat_dim();
        let h = self.hidden_activations(input);
        let mut logits = Vec::with_capacity(self.num_labels);
        let mut offsets = Vec::with_capacity(self.num_labels);
        for c in 0..self.num_labels {
            let w = &self.params[l.class_w + c * f..l.class_w + (c + 1) * f];
            logits.push(dot(w, &h) + self.params[l.class_b + c]);
            let mut o = [0.0; 4];
            for (t, ot) in o.iter_mut().enumerate() {
                let row = (c * 4 + t) * f;
                let w = &self.params[l.offset_w + row..l.offset_w + row + f];
                *ot = dot(w, &h) + self.params[l.offset_b + c * 4 + t];
            }
            offsets.push(o);
        }
        (logits, offsets, h)
    }

    /// Accumulates the gradient of `sum_c dlogits[c] * logit_c +
    /// sum_{c,t} doffsets[c][t] * offset_{c,t}` into `grad`.
    fn backward_one(&self, input: &[f64], h: &[f64], dlogits: &[f64], doffsets: &[[f64; 4]], grad: &mut Head) {
        let l = self.layout();
        let f = self.feat_dim();
        let mut dh = if self.hidden > 0 { vec![0.0; f] } else { Vec::new() };
        for c in 0..self.num_labels {
            let g = dlogits[c];
            if g != 0.0 {
                let base = l.class_w + c * f;
                for k in 0..f {
                    grad.params[base + k] += g * h[k];
                }
                grad.params[l.class_b + c] += g;
                if self.hidden > 0 {
                    for k in 0..f {
                        dh[k] += g * self.params[base + k];
                    }
                }
            }
            for t in 0..4 {
                let g = doffsets[c][t];
                if g == 0.0 {
                    continue;
                }
                let base = l.offset_w + (c * 4 + t) * f;
                for k in 0..f {
                    grad.params[base + k] += g * h[k];
                }
                grad.params[l.offset_b + c * 4 + t] += g;
                if self.hidden > 0 {
                    for k in 0..f {
                        dh[k] += g * self.params[base + k];
                    }
                }
            }
        }
        if self.hidden > 0 {
            for u in 0..self.hidden {
                let dpre = dh[u] * (1.0 - h[u] * h[u]);
                if dpre == 0.0 {
                    continue;
                }
                let base = l.hidden_w + u * self.in_dim;
                for k in 0..self.in_dim {
                    grad.params[base + k] += dpre * input[k];
                }
                grad.params[l.hidden_b + u] += dpre;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameters of the prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct PredParams {
    pub head: Head,
}

/// Parameters of the conditional head; its input is `features ++ noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondParams {
    pub head: Head,
    pub noise_dim: usize,
}

impl PredParams {
    pub fn init<R: Rng + ?Sized>(num_classes: usize, feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { head: Head::init(num_classes + 1, feature_dim, hidden, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { head: self.head.zeros_like() }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_labels - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim
    }
}

impl CondParams {
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        feature_dim: usize,
        noise_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self { head: Head::init(num_classes + 1, feature_dim + noise_dim, hidden, rng), noise_dim }
    }

    pub fn zeros_like(&self) -> Self {
        Self { head: self.head.zeros_like(), noise_dim: self.noise_dim }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_labels - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim - self.noise_dim
    }

    /// Zeroes every weight that reads a noise input, severing the noise path.
    pub fn sever_noise(&mut self) {
        if self.noise_dim == 0 {
            return;
        }
        let head = &mut self.head;
        let l = head.layout();
        let d = head.in_dim - self.noise_dim;
        if head.hidden > 0 {
            for u in 0..head.hidden {
                for k in d..head.in_dim {
                    head.params[l.hidden_w + u * head.in_dim + k] = 0.0;
                }
            }
        } else {
            for r in 0..head.num_labels {
                for k in d..head.in_dim {
                    head.params[l.class_w + r * head.in_dim + k] = 0.0;
                }
            }
            for r in 0..head.num_labels * 4 {
                for k in d..head.in_dim {
                    head.params[l.offset_w + r * head.in_dim + k] = 0.0;
                }
            }
        }
    }
}

/// One noise draw, shared by every proposal of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    pub z: Vec<f64>,
}

impl NoiseVector {
    /// Entries i.i.d. uniform on `[0, 1)`.
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self { z: (0..dim).map(|_| rng.random::<f64>()).collect() }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { z: vec![0.0; dim] }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.z.iter().all(|v| (0.0..=1.0).contains(v)), "noise entries must lie in [0, 1]");
        Ok(())
    }
}

fn check_features(sample: &ImageSample, dim: usize) -> Result<()> {
    for p in &sample.proposals {
        ensure!(
            p.features.len() == dim,
            "image {} proposal {}: feature dimension {} but model expects {dim}",
            sample.id,
            p.index,
            p.features.len()
        );
    }
    Ok(())
}

pub fn pred_forward(theta: &PredParams, sample: &ImageSample) -> Result<ClassDistribution> {
    check_features(sample, theta.head.in_dim)?;
    let num_labels = theta.head.num_labels;
    let b = sample.num_proposals();
    let mut probs = Vec::with_capacity(b * num_labels);
    let mut offsets = Vec::with_capacity(b * num_labels);
    for p in &sample.proposals {
        let (logits, offs, _) = theta.head.forward_one(&p.features);
        probs.extend(softmax(&logits));
        offsets.extend(offs);
    }
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction head output".into()));
    }
    Ok(ClassDistribution { anchors: sample.anchors(), num_labels, probs, offsets })
}

fn cond_input(features: &[f64], z: &NoiseVector) -> Vec<f64> {
    let mut v = Vec::with_capacity(features.len() + z.z.len());
    v.extend_from_slice(features);
    v.extend_from_slice(&z.z);
    v
}

fn check_cond(theta: &CondParams, sample: &ImageSample, z: &NoiseVector) -> Result<()> {
    ensure!(z.z.len() == theta.noise_dim, "noise dimension {} but model expects {}", z.z.len(), theta.noise_dim);
    check_features(sample, theta.feature_dim())
}

pub fn cond_forward(theta: &CondParams, sample: &ImageSample, z: &NoiseVector) -> Result<ScoreMatrix> {
    check_cond(theta, sample, z)?;
    let num_labels = theta.head.num_labels;
    let b = sample.num_proposals();
    let mut scores = Vec::with_capacity(b * num_labels);
    let mut offsets = Vec::with_capacity(b * num_labels);
    for p in &sample.proposals {
        let (logits, offs, _) = theta.head.forward_one(&cond_input(&p.features, z));
        scores.extend(logits);
        offsets.extend(offs);
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conditional head output".into()));
    }
    Ok(ScoreMatrix { anchors: sample.anchors(), num_labels, scores, offsets })
}

/// Gradient of `S(y) = sum_i G[i][y_i]` with respect to the conditional
/// parameters.
pub fn cond_score_grad(
    theta: &CondParams,
    sample: &ImageSample,
    z: &NoiseVector,
    y: &BoxLabeling,
) -> Result<CondParams> {
    let mut grad = theta.zeros_like();
    accumulate_score_diff(theta, sample, z, &y.classes, None, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `scale * (grad S(plus) - grad S(minus))` to `grad`. Proposals where
/// the two labelings agree contribute nothing, so identical labelings leave
/// `grad` exactly unchanged.
pub(crate) fn accumulate_score_diff(
    theta: &CondParams,
    sample: &ImageSample,
    z: &NoiseVector,
    plus: &[usize],
    minus: Option<&[usize]>,
    scale: f64,
    grad: &mut CondParams,
) -> Result<()> {
    check_cond(theta, sample, z)?;
    let b = sample.num_proposals();
    let n = theta.head.num_labels;
    ensure!(plus.len() == b, "labeling covers {} proposals, image {b}", plus.len());
    if let Some(m) = minus {
        ensure!(m.len() == b, "labeling covers {} proposals, image {b}", m.len());
    }
    ensure!(plus.iter().chain(minus.unwrap_or(&[])).all(|&c| c < n), "label outside 0..{n}");
    let zero_offsets = vec![[0.0; 4]; n];
    let mut dlogits = vec![0.0; n];
    for (i, p) in sample.proposals.iter().enumerate() {
        let cm = minus.map(|m| m[i]);
        if cm == Some(plus[i]) {
            continue;
        }
        dlogits.iter_mut().for_each(|v| *v = 0.0);
        dlogits[plus[i]] += scale;
        if let Some(cm) = cm {
            dlogits[cm] -= scale;
        }
        let input = cond_input(&p.features, z);
        let h = theta.head.hidden_activations(&input);
        theta.head.backward_one(&input, &h, &dlogits, &zero_offsets, &mut grad.head);
    }
    Ok(())
}

/// Smooth-L1 regression of the conditional offsets toward `targets` on
/// proposals where `y` and `targets` carry the same foreground class.
/// Returns `(lambda / B) * sum_i smoothL1(offset_i - encode(anchor_i, target_i))`
/// and its gradient.
pub fn cond_regression_grad(
    theta: &CondParams,
    sample: &ImageSample,
    z: &NoiseVector,
    y: &BoxLabeling,
    targets: &BoxLabeling,
    cfg: &LossConfig,
) -> Result<(f64, CondParams)> {
    let mut grad = theta.zeros_like();
    let value = accumulate_regression(theta, sample, z, y, targets, cfg.lambda, 1.0, &mut grad)?;
    Ok((value, grad))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_regression(
    theta: &CondParams,
    sample: &ImageSample,
    z: &NoiseVector,
    y: &BoxLabeling,
    targets: &BoxLabeling,
    lambda: f64,
    scale: f64,
    grad: &mut CondParams,
) -> Result<f64> {
    check_cond(theta, sample, z)?;
    let b = sample.num_proposals();
    ensure!(y.len() == b && targets.len() == b, "labelings must cover {b} proposals");
    let n = theta.head.num_labels;
    if lambda == 0.0 || b == 0 {
        return Ok(0.0);
    }
    let norm = lambda / b as f64;
    let mut value = 0.0;
    let dlogits = vec![0.0; n];
    for (i, p) in sample.proposals.iter().enumerate() {
        let c = y.classes[i];
        if c == 0 || c != targets.classes[i] {
            continue;
        }
        let input = cond_input(&p.features, z);
        let (_, offs, h) = theta.head.forward_one(&input);
        let t = encode_unchecked(&p.geometry, &targets.boxes[i]);
        let r = [offs[c][0] - t[0], offs[c][1] - t[1], offs[c][2] - t[2], offs[c][3] - t[3]];
        value += norm * smooth_l1_unchecked(&r);
        let mut doff = vec![[0.0; 4]; n];
        for k in 0..4 {
            doff[c][k] = scale * norm * smooth_l1_derivative(r[k]);
        }
        theta.head.backward_one(&input, &h, &dlogits, &doff, &mut grad.head);
    }
    Ok(value)
}

/// Prediction-head objective with fixed conditional samples:
/// `DIV(Pr_p, Pr_c) - (1 - gamma) * DIV(Pr_p, Pr_p)`, and its gradient.
pub fn pred_objective_grad(
    theta: &PredParams,
    sample: &ImageSample,
    samples: &[BoxLabeling],
    cfg: &DiscConfig,
) -> Result<(f64, PredParams)> {
    cfg.validate()?;
    pred_objective_grad_weighted(theta, sample, samples, &cfg.loss, 1.0 - cfg.gamma)
}

/// As [`pred_objective_grad`] with an explicit weight on the prediction
/// self-diversity (zero drops the term).
pub fn pred_objective_grad_weighted(
    theta: &PredParams,
    sample: &ImageSample,
    samples: &[BoxLabeling],
    loss: &LossConfig,
    self_weight: f64,
) -> Result<(f64, PredParams)> {
    let dist = pred_forward(theta, sample)?;
    let dcfg = DiscConfig { gamma: 0.0, loss: *loss };
    let cross = div_pred_cond(&dist, samples, &dcfg)?;
    let self_pred = if self_weight != 0.0 { div_pred_pred(&dist, &dcfg)? } else { 0.0 };
    let value = cross - self_weight * self_pred;

    let b = dist.num_boxes();
    let n = dist.num_labels;
    let k = samples.len();
    let inv_b = 1.0 / b as f64;
    let inv_bk = inv_b / k as f64;
    let mut grad = theta.zeros_like();
    let mut cross_loss = vec![0.0; n];
    let mut dprob = vec![0.0; n];
    let mut dlogits = vec![0.0; n];
    let mut doffsets = vec![[0.0; 4]; n];
    for (i, p) in sample.proposals.iter().enumerate() {
        let row = dist.row(i);
        let frame = &p.geometry;
        cross_loss.iter_mut().for_each(|v| *v = 0.0);
        doffsets.iter_mut().for_each(|v| *v = [0.0; 4]);
        for s in samples {
            let t = s.classes[i];
            for (c, lc) in cross_loss.iter_mut().enumerate() {
                if c != t {
                    *lc += 1.0;
                }
            }
            if t != 0 && loss.lambda != 0.0 {
                let target = encode_unchecked(frame, &s.boxes[i]);
                let o = dist.offset(i, t);
                let r = [o[0] - target[0], o[1] - target[1], o[2] - target[2], o[3] - target[3]];
                cross_loss[t] += loss.lambda * smooth_l1_unchecked(&r);
                for q in 0..4 {
                    doffsets[t][q] += inv_bk * row[t] * loss.lambda * smooth_l1_derivative(r[q]);
                }
            }
        }
        // d/dP_c of the box objective; the self term's 0-1 part is 1 - sum P^2
        // and its localization part vanishes on the diagonal.
        for c in 0..n {
            dprob[c] = inv_bk * cross_loss[c] - self_weight * inv_b * 2.0 * (1.0 - row[c]);
        }
        let mean: f64 = (0..n).map(|c| row[c] * dprob[c]).sum();
        for c in 0..n {
            dlogits[c] = row[c] * (dprob[c] - mean);
        }
        let (_, _, h) = theta.head.forward_one(&p.features);
        theta.head.backward_one(&p.features, &h, &dlogits, &doffsets, &mut grad.head);
    }
    if !value.is_finite() || !grad.head.is_finite() {
        return Err(Error::NonFinite(format!("prediction objective on image {}", sample.id)));
    }
    Ok((value, grad))
}
