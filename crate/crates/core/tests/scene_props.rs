mod common;

use common::seeded;
use dhq::iou;
use dhq::scenes::{generate, generate_one, SceneGenParams, CHANNELS};
use proptest::prelude::*;

fn mean_pairwise_iou(params: &SceneGenParams) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in generate(params, 100).unwrap() {
        for i in 0..s.gt_boxes.len() {
            for j in i + 1..s.gt_boxes.len() {
                sum += iou(&s.gt_boxes[i], &s.gt_boxes[j]).unwrap();
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn tighter_clusters_overlap_more() {
    let spreads = [0.3, 0.2, 0.12, 0.06, 0.03];
    let overlap: Vec<f64> = spreads
        .iter()
        .map(|&cluster_spread| {
            mean_pairwise_iou(&SceneGenParams {
                cluster_spread,
                grid: 4,
                ..SceneGenParams::default()
            })
        })
        .collect();
    for w in overlap.windows(2) {
        assert!(w[1] > w[0], "{overlap:?}");
    }
}

proptest! {
    #![proptest_config(seeded(100))]

    #[test]
    fn scenes_are_reproducible_and_valid(seed in any::<u64>(), index in 0usize..1000, mean in 1.0..20.0f64, grid in 2usize..10) {
        let params = SceneGenParams { seed, mean_objects: mean, grid, ..SceneGenParams::default() };
        let a = generate_one(&params, index).unwrap();
        prop_assert_eq!(&a, &generate_one(&params, index).unwrap());
        prop_assert!(!a.gt_boxes.is_empty());
        prop_assert_eq!(a.density, a.gt_boxes.len());
        prop_assert_eq!(a.features.len(), grid * grid * CHANNELS);
        prop_assert!(a.features.iter().all(|v| v.is_finite()));
        for b in &a.gt_boxes {
            prop_assert!(b.validate().is_ok());
            prop_assert!((0.0..=1.0).contains(&b.cx) && (0.0..=1.0).contains(&b.cy));
        }
    }
}
