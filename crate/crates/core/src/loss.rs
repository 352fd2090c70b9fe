//! Task loss between two labelings: per-proposal 0-1 classification loss
//! plus a `lambda`-weighted smooth-L1 localization loss, averaged over
//! proposals.
//!
//! Localization compares box-regression encodings of the two geometries in
//! a shared reference frame. [`delta_box`] uses the unit frame; the
//! training pipeline uses [`delta_box_in`] with the proposal both
//! hypotheses were regressed from, which reduces the localization term to
//! smooth-L1 on the difference of regression offsets.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::types::{BoxGeometry, BoxLabeling};

pub const DEFAULT_LAMBDA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = Self { lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda.is_finite() && self.lambda >= 0.0,
            "loss ratio must be finite and non-negative, got {}",
            self.lambda
        );
        Ok(())
    }
}

#[inline]
fn huber(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of the scalar smooth-L1 kernel.
#[inline]
pub fn smooth_l1_derivative(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn smooth_l1(d: &[f64; 4]) -> Result<f64> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smooth-L1 input".into()));
    }
    Ok(smooth_l1_unchecked(d))
}

#[inline]
pub(crate) fn smooth_l1_unchecked(d: &[f64; 4]) -> f64 {
    d.iter().map(|&x| huber(x)).sum()
}

/// Regression target of `target` relative to `proposal`.
pub fn box_encode(proposal: &BoxGeometry, target: &BoxGeometry) -> Result<[f64; 4]> {
    ensure!(
        proposal.w > 0.0 && proposal.h > 0.0 && target.w > 0.0 && target.h > 0.0,
        "box_encode requires positive extents"
    );
    Ok(encode_unchecked(proposal, target))
}

#[inline]
pub(crate) fn encode_unchecked(p: &BoxGeometry, t: &BoxGeometry) -> [f64; 4] {
    [(t.cx - p.cx) / p.w, (t.cy - p.cy) / p.h, (t.w / p.w).ln(), (t.h / p.h).ln()]
}

/// Inverse of [`box_encode`].
pub fn box_decode(proposal: &BoxGeometry, d: &[f64; 4]) -> BoxGeometry {
    BoxGeometry {
        cx: proposal.cx + d[0] * proposal.w,
        cy: proposal.cy + d[1] * proposal.h,
        w: proposal.w * d[2].exp(),
        h: proposal.h * d[3].exp(),
    }
}

/// `encode(frame, a) - encode(frame, b)`.
#[inline]
pub fn loc_residual(frame: &BoxGeometry, a: &BoxGeometry, b: &BoxGeometry) -> [f64; 4] {
    let ea = encode_unchecked(frame, a);
    let eb = encode_unchecked(frame, b);
    [ea[0] - eb[0], ea[1] - eb[1], ea[2] - eb[2], ea[3] - eb[3]]
}

/// Per-proposal loss with the unit reference frame.
pub fn delta_box(y1: (usize, &BoxGeometry), y2: (usize, &BoxGeometry), cfg: &LossConfig) -> f64 {
    delta_box_in(y1, y2, &BoxGeometry::UNIT, cfg)
}

/// Per-proposal loss with localization measured in `frame`.
///
/// The localization term is active only when both labels are the same
/// foreground class.
#[inline]
pub fn delta_box_in(
    y1: (usize, &BoxGeometry),
    y2: (usize, &BoxGeometry),
    frame: &BoxGeometry,
    cfg: &LossConfig,
) -> f64 {
    if y1.0 != y2.0 {
        return 1.0;
    }
    if y1.0 == 0 || cfg.lambda == 0.0 {
        return 0.0;
    }
    cfg.lambda * smooth_l1_unchecked(&loc_residual(frame, y1.1, y2.1))
}

pub fn delta_total(y1: &BoxLabeling, y2: &BoxLabeling, cfg: &LossConfig) -> Result<f64> {
    let frames = vec![BoxGeometry::UNIT; y1.len()];
    delta_total_in(y1, y2, &frames, cfg)
}

/// Mean of [`delta_box_in`] over proposals, proposal `i` measured in `frames[i]`.
pub fn delta_total_in(y1: &BoxLabeling, y2: &BoxLabeling, frames: &[BoxGeometry], cfg: &LossConfig) -> Result<f64> {
    ensure!(
        y1.len() == y2.len() && y1.len() == frames.len(),
        "labeling lengths differ: {} vs {} ({} frames)",
        y1.len(),
        y2.len(),
        frames.len()
    );
    ensure!(!y1.is_empty(), "labelings must cover at least one proposal");
    let sum: f64 = (0..y1.len())
        .map(|i| delta_box_in((y1.classes[i], &y1.boxes[i]), (y2.classes[i], &y2.boxes[i]), &frames[i], cfg))
        .sum();
    Ok(sum / y1.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const U: BoxGeometry = BoxGeometry::UNIT;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxGeometry {
        BoxGeometry::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(smooth_l1(&[2.0, -2.0, 0.0, 0.0]).unwrap(), 3.0);
        assert!(smooth_l1(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn smooth_l1_is_c1_at_the_kink() {
        let h = 1e-6;
        for x in [1.0 - 1e-6, 1.0 + 1e-6, -1.0 + 1e-6, -1.0 - 1e-6] {
            let fd = (huber(x + h) - huber(x - h)) / (2.0 * h);
            assert!((fd - smooth_l1_derivative(x)).abs() < 1e-5, "x={x} fd={fd}");
        }
    }

    #[test]
    fn encode_examples() {
        let p = b(5.0, 5.0, 10.0, 10.0);
        assert_eq!(box_encode(&p, &p).unwrap(), [0.0; 4]);
        let t = box_encode(&p, &b(6.0, 5.0, 10.0, 10.0)).unwrap();
        assert!((t[0] - 0.1).abs() < 1e-15 && t[1] == 0.0 && t[2] == 0.0 && t[3] == 0.0);
        let t = box_encode(&p, &b(5.0, 5.0, 20.0, 10.0)).unwrap();
        assert_eq!(t, [0.0, 0.0, 2f64.ln(), 0.0]);
        let bad = BoxGeometry { cx: 0.0, cy: 0.0, w: -1.0, h: 1.0 };
        assert!(box_encode(&p, &bad).is_err());
    }

    #[test]
    fn delta_box_examples() {
        let cfg = LossConfig::new(3.0).unwrap();
        let g = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(delta_box((1, &g), (1, &g), &cfg), 0.0);
        assert_eq!(delta_box((1, &g), (2, &b(9.0, 9.0, 3.0, 3.0)), &cfg), 1.0);
        let shifted = b(1.0, 0.0, 1.0, 1.0);
        assert_eq!(delta_box((1, &g), (1, &shifted), &cfg), 1.5);
        // Background pairs carry no geometry.
        assert_eq!(delta_box((0, &g), (0, &shifted), &cfg), 0.0);
    }

    #[test]
    fn delta_total_examples() {
        let cfg0 = LossConfig::new(0.0).unwrap();
        let y = |c: &[usize]| BoxLabeling::on_anchors(c.to_vec(), &vec![U; c.len()]).unwrap();
        assert_eq!(delta_total(&y(&[1, 2]), &y(&[1, 2]), &LossConfig::default()).unwrap(), 0.0);
        assert_eq!(delta_total(&y(&[1, 1]), &y(&[1, 2]), &cfg0).unwrap(), 0.5);
        assert_eq!(delta_total(&y(&[0, 1, 2, 3]), &y(&[1, 2, 3, 0]), &cfg0).unwrap(), 1.0);
        assert!(delta_total(&y(&[1]), &y(&[1, 2]), &cfg0).is_err());
    }

    #[test]
    fn invalid_lambda() {
        assert!(LossConfig::new(-1.0).is_err());
        assert!(LossConfig::new(f64::INFINITY).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoxGeometry> {
        (-10.0..10.0f64, -10.0..10.0f64, 0.1..10.0f64, 0.1..10.0f64).prop_map(|(cx, cy, w, h)| BoxGeometry {
            cx,
            cy,
            w,
            h,
        })
    }

    fn arb_labeling(n: usize) -> impl Strategy<Value = BoxLabeling> {
        (proptest::collection::vec(0usize..4, n), proptest::collection::vec(arb_box(), n))
            .prop_map(|(c, bx)| BoxLabeling::new(c, bx).unwrap())
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(p in arb_box(), t in arb_box()) {
            let d = box_encode(&p, &t).unwrap();
            let r = box_decode(&p, &d);
            prop_assert!((r.cx - t.cx).abs() < 1e-9 && (r.cy - t.cy).abs() < 1e-9);
            prop_assert!((r.w - t.w).abs() < 1e-9 && (r.h - t.h).abs() < 1e-9);
        }

        #[test]
        fn delta_identity_and_symmetry(
            (y1, y2) in (1usize..6).prop_flat_map(|n| (arb_labeling(n), arb_labeling(n))),
            lambda in 0.0..5.0f64,
        ) {
            let cfg = LossConfig::new(lambda).unwrap();
            prop_assert_eq!(delta_total(&y1, &y1, &cfg).unwrap(), 0.0);
            prop_assert_eq!(delta_total(&y1, &y2, &cfg).unwrap(), delta_total(&y2, &y1, &cfg).unwrap());
        }

        #[test]
        fn zero_lambda_is_normalized_hamming(
            (y1, y2) in (1usize..6).prop_flat_map(|n| (arb_labeling(n), arb_labeling(n))),
        ) {
            let cfg = LossConfig::new(0.0).unwrap();
            let ham = y1.classes.iter().zip(&y2.classes).filter(|(a, b)| a != b).count();
            let expect = ham as f64 / y1.len() as f64;
            prop_assert!((delta_total(&y1, &y2, &cfg).unwrap() - expect).abs() < 1e-15);
        }
    }
}
