//! Exact constrained MAP inference over conditional score matrices.
//!
//! A labeling is compatible with an annotation when every present class is
//! assigned to at least one proposal. Maximizing the summed score over
//! compatible labelings reduces to a minimum-regret matching: each required
//! class is designated one distinct proposal, paying `rowmax_i - G[i][j]`,
//! and every other proposal keeps its row argmax.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{ensure, Error, Result};
use crate::loss::{delta_box_in, LossConfig};
use crate::types::{
    argmax_first, enumerate_labelings_capped, is_compatible_classes, BoxLabeling, ImageAnnotation, ScoreMatrix,
    DEFAULT_ENUMERATION_CAP,
};

/// Largest number of required classes solved by enumeration rather than
/// the Hungarian method.
const EXHAUSTIVE_MAX_CLASSES: usize = 3;

/// Summed score of a labeling, or the sentinel for incompatible labelings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointScore {
    Finite(f64),
    Incompatible,
}

impl JointScore {
    pub fn is_finite(&self) -> bool {
        matches!(self, JointScore::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            JointScore::Finite(v) => Some(v),
            JointScore::Incompatible => None,
        }
    }
}

impl PartialOrd for JointScore {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (JointScore::Incompatible, JointScore::Incompatible) => Some(Ordering::Equal),
            (JointScore::Incompatible, JointScore::Finite(_)) => Some(Ordering::Less),
            (JointScore::Finite(_), JointScore::Incompatible) => Some(Ordering::Greater),
            (JointScore::Finite(a), JointScore::Finite(b)) => a.partial_cmp(b),
        }
    }
}

/// How missing annotated classes are restored after the row-wise argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Minimum-regret matching; attains the constrained maximum.
    #[default]
    Exact,
    /// For each missing class, relabel the unflipped proposal with the
    /// highest score for that class. Fast but can be suboptimal.
    MaxScore,
}

fn check_dims(g: &ScoreMatrix, a: &ImageAnnotation) -> Result<()> {
    ensure!(g.num_labels >= 1, "score matrix has no label columns");
    ensure!(
        g.scores.len() == g.num_boxes() * g.num_labels && g.offsets.len() == g.scores.len(),
        "score matrix storage does not match {} x {}",
        g.num_boxes(),
        g.num_labels
    );
    a.check_classes(g.num_classes())
}

#[inline]
fn score_sum(g: &ScoreMatrix, classes: &[usize]) -> f64 {
    classes.iter().enumerate().map(|(i, &c)| g.score(i, c)).sum()
}

pub fn joint_score(g: &ScoreMatrix, y: &BoxLabeling, a: &ImageAnnotation) -> Result<JointScore> {
    joint_score_classes(g, &y.classes, a)
}

pub fn joint_score_classes(g: &ScoreMatrix, classes: &[usize], a: &ImageAnnotation) -> Result<JointScore> {
    check_dims(g, a)?;
    ensure!(
        classes.len() == g.num_boxes(),
        "labeling covers {} proposals, score matrix {}",
        classes.len(),
        g.num_boxes()
    );
    if !is_compatible_classes(classes, a)? {
        return Ok(JointScore::Incompatible);
    }
    Ok(JointScore::Finite(score_sum(g, classes)))
}

pub fn constrained_argmax(g: &ScoreMatrix, a: &ImageAnnotation) -> Result<BoxLabeling> {
    constrained_argmax_with(g, a, SamplerMode::Exact)
}

pub fn constrained_argmax_with(g: &ScoreMatrix, a: &ImageAnnotation, mode: SamplerMode) -> Result<BoxLabeling> {
    let classes = constrained_argmax_classes(g, a, mode)?;
    Ok(g.labeling(classes))
}

/// Class vector of the constrained argmax; ties resolve to the
/// lexicographically smallest class vector when at most three classes are
/// required.
pub fn constrained_argmax_classes(g: &ScoreMatrix, a: &ImageAnnotation, mode: SamplerMode) -> Result<Vec<usize>> {
    check_dims(g, a)?;
    let b = g.num_boxes();
    let required: Vec<usize> = a.required().collect();
    if required.len() > b {
        return Err(Error::Infeasible { required: required.len(), proposals: b });
    }

    let base: Vec<usize> = (0..b).map(|i| argmax_first(g.row(i))).collect();
    let mut present = vec![false; g.num_labels];
    for &c in &base {
        present[c] = true;
    }
    if required.iter().all(|&j| present[j]) {
        return Ok(base);
    }

    match mode {
        SamplerMode::MaxScore => Ok(max_score_repair(g, base, &required, &present)),
        SamplerMode::Exact if required.len() <= EXHAUSTIVE_MAX_CLASSES => Ok(exhaustive_matching(g, base, &required)),
        SamplerMode::Exact => Ok(hungarian_matching(g, base, &required)),
    }
}

fn max_score_repair(g: &ScoreMatrix, mut classes: Vec<usize>, required: &[usize], present: &[bool]) -> Vec<usize> {
    let mut flipped = vec![false; classes.len()];
    for &j in required.iter().filter(|&&j| !present[j]) {
        let mut best: Option<usize> = None;
        for i in (0..classes.len()).filter(|&i| !flipped[i]) {
            if best.is_none_or(|bi| g.score(i, j) > g.score(bi, j)) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            classes[i] = j;
            flipped[i] = true;
        }
    }
    classes
}

fn regret(g: &ScoreMatrix, base: &[usize], i: usize, j: usize) -> f64 {
    g.score(i, base[i]) - g.score(i, j)
}

/// Enumerates injective class-to-proposal designations. Only the `r`
/// lowest-regret proposals per class (plus ties at the cut) can appear in an
/// optimal designation, so the search stays tiny.
fn exhaustive_matching(g: &ScoreMatrix, base: Vec<usize>, required: &[usize]) -> Vec<usize> {
    let r = required.len();
    let candidates: Vec<Vec<usize>> = required
        .iter()
        .map(|&j| {
            let mut idx: Vec<usize> = (0..base.len()).collect();
            idx.sort_by(|&p, &q| {
                regret(g, &base, p, j).partial_cmp(&regret(g, &base, q, j)).unwrap_or(Ordering::Equal).then(p.cmp(&q))
            });
            let cut = regret(g, &base, idx[r - 1], j);
            idx.into_iter()
                .enumerate()
                .take_while(|&(rank, i)| rank < r || regret(g, &base, i, j) == cut)
                .map(|(_, i)| i)
                .collect()
        })
        .collect();

    struct Search<'a> {
        g: &'a ScoreMatrix,
        base: &'a [usize],
        required: &'a [usize],
        candidates: &'a [Vec<usize>],
        chosen: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn run(&mut self, depth: usize) {
            if depth == self.required.len() {
                let mut classes = self.base.to_vec();
                for (&i, &j) in self.chosen.iter().zip(self.required) {
                    classes[i] = j;
                }
                let s = score_sum(self.g, &classes);
                let better = match &self.best {
                    None => true,
                    Some((bs, bc)) => s > *bs || (s == *bs && classes < *bc),
                };
                if better {
                    self.best = Some((s, classes));
                }
                return;
            }
            for k in 0..self.candidates[depth].len() {
                let i = self.candidates[depth][k];
                if self.chosen.contains(&i) {
                    continue;
                }
                self.chosen.push(i);
                self.run(depth + 1);
                self.chosen.pop();
            }
        }
    }

    let mut search =
        Search { g, base: &base, required, candidates: &candidates, chosen: Vec::with_capacity(r), best: None };
    search.run(0);
    search.best.expect("required.len() <= proposals guarantees a designation").1
}

fn hungarian_matching(g: &ScoreMatrix, mut base: Vec<usize>, required: &[usize]) -> Vec<usize> {
    let costs: Vec<Vec<f64>> =
        required.iter().map(|&j| (0..base.len()).map(|i| regret(g, &base, i, j)).collect()).collect();
    let assigned = assignment::solve(&costs);
    for (&j, &i) in required.iter().zip(&assigned) {
        base[i] = j;
    }
    base
}

/// Exhaustive oracle for [`constrained_argmax`]; keeps the first maximum in
/// lexicographic order.
pub fn brute_force_argmax(g: &ScoreMatrix, a: &ImageAnnotation) -> Result<BoxLabeling> {
    brute_force_argmax_capped(g, a, DEFAULT_ENUMERATION_CAP)
}

pub fn brute_force_argmax_capped(g: &ScoreMatrix, a: &ImageAnnotation, cap: u64) -> Result<BoxLabeling> {
    check_dims(g, a)?;
    let b = g.num_boxes();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for y in enumerate_labelings_capped(b, g.num_classes(), cap)? {
        if !is_compatible_classes(&y, a)? {
            continue;
        }
        let s = score_sum(g, &y);
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, y));
        }
    }
    match best {
        Some((_, classes)) => Ok(g.labeling(classes)),
        None => Err(Error::Infeasible { required: a.num_required(), proposals: b }),
    }
}

/// Score matrix with the per-proposal loss against `reference` folded in:
/// `G'[i][j] = G[i][j] + (epsilon / B) * delta((j, box_ij), reference_i)`.
pub fn loss_augmented_scores(
    g: &ScoreMatrix,
    reference: &BoxLabeling,
    epsilon: f64,
    cfg: &LossConfig,
) -> Result<ScoreMatrix> {
    let b = g.num_boxes();
    ensure!(reference.len() == b, "reference labeling covers {} proposals, score matrix {b}", reference.len());
    ensure!(epsilon.is_finite(), "epsilon must be finite");
    let mut out = g.clone();
    if b == 0 {
        return Ok(out);
    }
    let scale = epsilon / b as f64;
    for i in 0..b {
        let target = (reference.classes[i], &reference.boxes[i]);
        for j in 0..g.num_labels {
            let hyp = g.decoded_box(i, j);
            out.scores[i * g.num_labels + j] += scale * delta_box_in((j, &hyp), target, &g.anchors[i], cfg);
        }
    }
    Ok(out)
}

/// Argmax of `S(y) + epsilon * Delta(y, reference)` over compatible labelings.
pub fn loss_augmented_argmax(
    g: &ScoreMatrix,
    a: &ImageAnnotation,
    reference: &BoxLabeling,
    epsilon: f64,
    cfg: &LossConfig,
) -> Result<BoxLabeling> {
    loss_augmented_argmax_with(g, a, reference, epsilon, cfg, SamplerMode::Exact)
}

pub fn loss_augmented_argmax_with(
    g: &ScoreMatrix,
    a: &ImageAnnotation,
    reference: &BoxLabeling,
    epsilon: f64,
    cfg: &LossConfig,
    mode: SamplerMode,
) -> Result<BoxLabeling> {
    let augmented = loss_augmented_scores(g, reference, epsilon, cfg)?;
    let classes = constrained_argmax_classes(&augmented, a, mode)?;
    Ok(g.labeling(classes))
}
