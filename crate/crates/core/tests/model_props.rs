mod common;

use common::seeded;
use dhq::scenes::{generate, SceneGenParams};
use dhq::{Model, ModelConfig, Scene};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        grid: 4,
        hidden: 8,
        encoder_layers: 1,
        dec_before: 1,
        dec_after: 1,
        queries: 4,
        ..ModelConfig::default()
    }
}

fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    let p = SceneGenParams {
        grid: 4,
        mean_objects: 3.0,
        seed,
        ..SceneGenParams::default()
    };
    generate(&p, n).unwrap()
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    // trainable DCG from the start so its weights carry gradient too
    let variants = [
        ModelConfig {
            dcg_zero_init: false,
            ..tiny()
        },
        ModelConfig {
            dcg_zero_init: false,
            aligned: false,
            gqs: false,
            ..tiny()
        },
        ModelConfig {
            dcg: false,
            ..tiny()
        },
        ModelConfig {
            dcg_zero_init: false,
            gate_direction: dhq::GateDirection::Above,
            c_low: 0.0,
            ..tiny()
        },
    ];
    for (v, cfg) in variants.into_iter().enumerate() {
        for (k, s) in scenes(5, v as u64).iter().enumerate() {
            let mut m = Model::new(ModelConfig {
                seed: k as u64,
                ..cfg
            })
            .unwrap();
            let r = m.gradient_check(s, 5, 1e-6, k as u64).unwrap();
            assert!(r.max_rel_error < 1e-4, "variant {v} scene {k}: {r:?}");
        }
    }
}

proptest! {
    #![proptest_config(seeded(16))]

    #[test]
    fn zero_init_dcg_is_bitwise_transparent(seed in 0u64..1000, scene_seed in 0u64..1000, above: bool) {
        let gate_direction = if above { dhq::GateDirection::Above } else { dhq::GateDirection::Below };
        let plain = Model::new(ModelConfig { dcg: false, seed, gate_direction, ..tiny() }).unwrap();
        let with = Model::new(ModelConfig { dcg: true, seed, gate_direction, ..tiny() }).unwrap();
        for s in scenes(2, scene_seed) {
            let (a, b) = (plain.forward(&s).unwrap(), with.forward(&s).unwrap());
            prop_assert_eq!(a.stages, b.stages);
            prop_assert_eq!(plain.loss(&s).unwrap(), with.loss(&s).unwrap());
        }
    }

    #[test]
    fn stage_outputs_are_well_formed(seed in 0u64..1000, before in 0usize..3, after in 1usize..3, queries in 1usize..8) {
        let m = Model::new(ModelConfig { seed, dec_before: before, dec_after: after, queries, ..tiny() }).unwrap();
        let s = &scenes(1, seed)[0];
        let out = m.forward(s).unwrap();
        prop_assert_eq!(out.stages.len(), 1 + before + after);
        prop_assert_eq!(out.stages[0].scores.len(), 16);
        for st in &out.stages[1..] {
            prop_assert_eq!(st.scores.len(), queries);
            prop_assert!(st.scores.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!(st.boxes.iter().all(|b| b.validate().is_ok()));
        }
        prop_assert_eq!(m.forward(s).unwrap(), out);
    }
}
