//! Randomized properties of the sampler, post-processing, loss and metrics.

use discwsod::evalmetrics::{average_precision, iou, nms, Detection, GtBox};
use discwsod::loss::{box_decode, box_encode, delta_total, LossConfig};
use discwsod::sampler::{
    brute_force_argmax, constrained_argmax, constrained_argmax_with, joint_score, loss_augmented_argmax, JointScore,
    SamplerMode,
};
use discwsod::trainer::postprocess_samples;
use discwsod::types::is_compatible;
use discwsod::{BoxGeometry, ImageAnnotation, ScoreMatrix};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = BoxGeometry> {
    (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64)
        .prop_map(|(x, y, w, h)| BoxGeometry::from_corners(x, y, x + w, y + h).unwrap())
}

/// Score matrix over `b` proposals with real anchors and an annotation
/// requiring at most `b` classes.
fn instance() -> impl Strategy<Value = (ScoreMatrix, ImageAnnotation)> {
    (1usize..=6, 1usize..=3).prop_flat_map(|(b, c)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0..5.0f64, c + 1), b),
            prop::collection::vec(geometry(), b),
            prop::collection::vec(any::<bool>(), c),
            any::<prop::sample::Index>(),
        )
            .prop_map(move |(rows, anchors, mut present, pick)| {
                if !present.iter().any(|p| *p) {
                    present[pick.index(c)] = true;
                }
                while present.iter().filter(|p| **p).count() > b {
                    let last = present.iter().rposition(|p| *p).unwrap();
                    present[last] = false;
                }
                (ScoreMatrix::from_rows(&rows, anchors).unwrap(), ImageAnnotation::new(present))
            })
    })
}

fn finite(s: JointScore) -> f64 {
    match s {
        JointScore::Finite(v) => v,
        JointScore::Incompatible => panic!("incompatible labeling"),
    }
}

proptest! {
    #[test]
    fn constrained_argmax_is_compatible_and_optimal((g, a) in instance()) {
        let y = constrained_argmax(&g, &a).unwrap();
        prop_assert!(is_compatible(&y, &a).unwrap());
        let best = brute_force_argmax(&g, &a).unwrap();
        prop_assert_eq!(finite(joint_score(&g, &y, &a).unwrap()), finite(joint_score(&g, &best, &a).unwrap()));
    }

    /// The repair heuristic may relabel the only box of another required
    /// class; when its output is compatible it never beats the exact sampler.
    #[test]
    fn greedy_mode_never_beats_exact((g, a) in instance()) {
        let exact = finite(joint_score(&g, &constrained_argmax(&g, &a).unwrap(), &a).unwrap());
        let y = constrained_argmax_with(&g, &a, SamplerMode::MaxScore).unwrap();
        if let JointScore::Finite(v) = joint_score(&g, &y, &a).unwrap() {
            prop_assert!(v <= exact);
        }
    }

    #[test]
    fn zero_epsilon_loss_augmentation_is_plain_argmax((g, a) in instance(), lambda in 0.0..5.0f64) {
        let reference = constrained_argmax(&g, &a).unwrap();
        let cfg = LossConfig::new(lambda).unwrap();
        let y = loss_augmented_argmax(&g, &a, &reference, 0.0, &cfg).unwrap();
        prop_assert_eq!(y, reference);
    }

    #[test]
    fn postprocessing_keeps_compatibility(
        (g, a) in instance(),
        threshold in 0.0..1.0f64,
        nms_iou in 0.0..1.0f64,
    ) {
        let y = constrained_argmax(&g, &a).unwrap();
        let out = postprocess_samples(std::slice::from_ref(&y), std::slice::from_ref(&g), &a, threshold, nms_iou).unwrap();
        prop_assert_eq!(out.len(), 1);
        prop_assert!(is_compatible(&out[0], &a).unwrap());
        for (i, &c) in out[0].classes.iter().enumerate() {
            prop_assert!(c == 0 || c == y.classes[i]);
        }
    }

    #[test]
    fn loss_vanishes_on_identical_labelings((g, a) in instance(), lambda in 0.0..5.0f64) {
        let y = constrained_argmax(&g, &a).unwrap();
        let cfg = LossConfig::new(lambda).unwrap();
        prop_assert_eq!(delta_total(&y, &y, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn box_encoding_inverts(p in geometry(), t in geometry()) {
        let back = box_decode(&p, &box_encode(&p, &t).unwrap());
        for (u, v) in back.corners().iter().zip(t.corners()) {
            prop_assert!((u - v).abs() < 1e-9, "{back:?} vs {t:?}");
        }
    }

    #[test]
    fn iou_is_a_symmetric_overlap(a in geometry(), b in geometry()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_leaves_no_overlapping_pair(
        boxes in prop::collection::vec((geometry(), 0.0..1.0f64, 0u64..2), 0..12),
        thresh in 0.0..1.0f64,
    ) {
        let dets: Vec<Detection> = boxes
            .iter()
            .enumerate()
            .map(|(index, &(geometry, score, image_id))| Detection { image_id, index, class: 1, geometry, score })
            .collect();
        let kept = nms(&dets, thresh);
        prop_assert!(kept.len() <= dets.len() && (dets.is_empty() || !kept.is_empty()));
        for (i, x) in kept.iter().enumerate() {
            for y in &kept[i + 1..] {
                prop_assert!(x.image_id != y.image_id || iou(&x.geometry, &y.geometry) <= thresh);
            }
        }
    }

    #[test]
    fn average_precision_ignores_input_order(
        boxes in prop::collection::vec((geometry(), 0.0..1.0f64), 1..10),
        gts in prop::collection::vec(geometry(), 1..5),
    ) {
        let dets: Vec<Detection> = boxes
            .iter()
            .enumerate()
            .map(|(index, &(geometry, score))| Detection { image_id: 0, index, class: 1, geometry, score })
            .collect();
        let gts: Vec<GtBox> = gts.into_iter().map(|geometry| GtBox { image_id: 0, class: 1, geometry }).collect();
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let mut reversed = dets.clone();
        reversed.reverse();
        prop_assert_eq!(average_precision(&reversed, &gts, 0.5).unwrap(), ap);
    }
}
