mod common;

use common::{seeded, unit_box};
use dhq::suppress::{adaptive_nms, gt_density, nms, soft_nms};
use dhq::{iou, BBox, Detection};
use proptest::prelude::*;

/// Scores are drawn from a coarse set so ties occur.
fn scene() -> impl Strategy<Value = Vec<Detection>> {
    proptest::collection::vec((unit_box(), 0..20u32), 0..30).prop_map(|v| {
        v.into_iter()
            .map(|(b, s)| Detection::new("img", b, f64::from(s) / 20.0 + 0.01))
            .collect()
    })
}

/// Argmax-and-discard NMS: picks the best remaining detection (lowest index
/// among equal scores), then drops every remaining one it overlaps.
fn reference_nms(dets: &[Detection], thresh: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (a, b) = (remaining[k], remaining[best]);
            if dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b) {
                best = k;
            }
        }
        let top = remaining.swap_remove(best);
        let t = thresh(top);
        remaining.retain(|&j| iou(&dets[top].bbox, &dets[j].bbox).unwrap() <= t);
        kept.push(top);
    }
    kept
}

proptest! {
    #![proptest_config(seeded(200))]

    #[test]
    fn nms_matches_reference(dets in scene(), t in 0.1..0.9f64) {
        prop_assert_eq!(nms(&dets, t).unwrap(), reference_nms(&dets, |_| t));
    }

    #[test]
    fn adaptive_matches_reference(dets in scene(), t in 0.1..0.9f64, seed in 0..1000u64) {
        let dens: Vec<f64> = (0..dets.len()).map(|k| ((k as u64 * 7919 + seed) % 100) as f64 / 100.0).collect();
        prop_assert_eq!(
            adaptive_nms(&dets, &dens, t).unwrap(),
            reference_nms(&dets, |k| t.max(dens[k]))
        );
        let zeros = vec![0.0; dets.len()];
        prop_assert_eq!(adaptive_nms(&dets, &zeros, t).unwrap(), nms(&dets, t).unwrap());
    }

    #[test]
    fn nms_postconditions(dets in scene(), t in 0.1..0.9f64) {
        let kept = nms(&dets, t).unwrap();
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                prop_assert!(iou(&dets[i].bbox, &dets[j].bbox).unwrap() <= t);
                prop_assert!(dets[i].score >= dets[j].score);
            }
        }
        // every dropped box is covered by a kept box with at least its score
        for k in (0..dets.len()).filter(|k| !kept.contains(k)) {
            prop_assert!(kept.iter().any(|&i| dets[i].score >= dets[k].score
                && iou(&dets[i].bbox, &dets[k].bbox).unwrap() > t));
        }
        let mut all = nms(&dets, 1.0).unwrap();
        all.sort_unstable();
        prop_assert_eq!(all, (0..dets.len()).collect::<Vec<_>>());
    }

    #[test]
    fn soft_nms_scores_only_decay(dets in scene(), sigma in 0.05..2.0f64) {
        let out = soft_nms(&dets, sigma, 1e-3).unwrap();
        prop_assert!(out.len() <= dets.len());
        for d in &out {
            let orig = dets.iter().filter(|o| o.bbox == d.bbox).map(|o| o.score).fold(0.0, f64::max);
            prop_assert!(d.score <= orig && d.score >= 1e-3);
        }
        // with a vanishing width every overlap removes, like NMS at IoU 0
        let hard = soft_nms(&dets, 1e-12, 1e-3).unwrap();
        let keep0: Vec<BBox> = nms(&dets, 0.0).unwrap().into_iter().map(|k| dets[k].bbox).collect();
        prop_assert_eq!(hard.iter().map(|d| d.bbox).collect::<Vec<_>>(), keep0);
    }

    #[test]
    fn gt_density_bounds(boxes in proptest::collection::vec(unit_box(), 0..12)) {
        let d = gt_density(&boxes).unwrap();
        prop_assert_eq!(d.len(), boxes.len());
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
