//! Diversity estimators and the dissimilarity coefficient.
//!
//! Expectations over the factorized prediction distribution are computed
//! exactly (a sum over the `C + 1` labels of every proposal); expectations
//! over the conditional distribution use its `K` samples. Localization is
//! measured in each proposal's own frame.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::loss::{delta_box_in, LossConfig};
use crate::types::{BoxLabeling, ClassDistribution};

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub gamma: f64,
    pub loss: LossConfig,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, loss: LossConfig::default() }
    }
}

impl DiscConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { gamma, loss: LossConfig::new(lambda)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1], got {}", self.gamma);
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiversityReport {
    pub cross: f64,
    pub self_cond: f64,
    pub self_pred: f64,
    pub disc: f64,
}

impl DiversityReport {
    pub fn new(cross: f64, self_cond: f64, self_pred: f64, gamma: f64) -> Self {
        let disc = cross - gamma * self_cond - (1.0 - gamma) * self_pred;
        Self { cross, self_cond, self_pred, disc }
    }
}

fn check_samples(p: &ClassDistribution, samples: &[BoxLabeling]) -> Result<()> {
    ensure!(!samples.is_empty(), "at least one conditional sample is required");
    let b = p.num_boxes();
    ensure!(b > 0, "distribution covers no proposals");
    for s in samples {
        ensure!(s.len() == b, "sample covers {} proposals, distribution {b}", s.len());
        ensure!(s.classes.iter().all(|&c| c < p.num_labels), "sample label outside 0..{}", p.num_labels);
    }
    Ok(())
}

/// Cross diversity between the prediction distribution and `K` conditional
/// samples.
pub fn div_pred_cond(p: &ClassDistribution, samples: &[BoxLabeling], cfg: &DiscConfig) -> Result<f64> {
    check_samples(p, samples)?;
    let b = p.num_boxes();
    let mut total = 0.0;
    for i in 0..b {
        let frame = &p.anchors[i];
        for s in samples {
            let target = (s.classes[i], &s.boxes[i]);
            for c in 0..p.num_labels {
                let pc = p.prob(i, c);
                if pc == 0.0 {
                    continue;
                }
                let hyp = p.decoded_box(i, c);
                total += pc * delta_box_in((c, &hyp), target, frame, &cfg.loss);
            }
        }
    }
    Ok(total / (b * samples.len()) as f64)
}

/// Unbiased pairwise estimate of the conditional self-diversity. `frames`
/// holds one reference box per proposal.
pub fn div_cond_cond(samples: &[BoxLabeling], frames: &[crate::types::BoxGeometry], cfg: &DiscConfig) -> Result<f64> {
    let k = samples.len();
    ensure!(k >= 2, "self-diversity needs at least two samples, got {k}");
    let b = frames.len();
    ensure!(b > 0, "no proposals");
    ensure!(samples.iter().all(|s| s.len() == b), "samples must all cover {b} proposals");
    let mut total = 0.0;
    for (ka, sa) in samples.iter().enumerate() {
        for (kb, sb) in samples.iter().enumerate() {
            if ka == kb {
                continue;
            }
            for i in 0..b {
                total +=
                    delta_box_in((sa.classes[i], &sa.boxes[i]), (sb.classes[i], &sb.boxes[i]), &frames[i], &cfg.loss);
            }
        }
    }
    Ok(total / (k * (k - 1) * b) as f64)
}

/// Closed-form self-diversity of the prediction distribution.
pub fn div_pred_pred(p: &ClassDistribution, cfg: &DiscConfig) -> Result<f64> {
    let b = p.num_boxes();
    ensure!(b > 0, "distribution covers no proposals");
    let mut total = 0.0;
    for i in 0..b {
        let frame = &p.anchors[i];
        let boxes: Vec<_> = (0..p.num_labels).map(|c| p.decoded_box(i, c)).collect();
        for c in 0..p.num_labels {
            for c2 in 0..p.num_labels {
                let w = p.prob(i, c) * p.prob(i, c2);
                if w == 0.0 {
                    continue;
                }
                total += w * delta_box_in((c, &boxes[c]), (c2, &boxes[c2]), frame, &cfg.loss);
            }
        }
    }
    Ok(total / b as f64)
}

/// All three diversities and their combination. With a single sample the
/// conditional self-diversity is reported as zero.
pub fn disc(p: &ClassDistribution, samples: &[BoxLabeling], cfg: &DiscConfig) -> Result<DiversityReport> {
    cfg.validate()?;
    let cross = div_pred_cond(p, samples, cfg)?;
    let self_cond = if samples.len() >= 2 { div_cond_cond(samples, &p.anchors, cfg)? } else { 0.0 };
    let self_pred = div_pred_pred(p, cfg)?;
    Ok(DiversityReport::new(cross, self_cond, self_pred, cfg.gamma))
}
