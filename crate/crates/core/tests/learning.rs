//! Trains the default detector on sparse scenes; takes several minutes.

use dhq::detector::{train, Model, ModelConfig, TrainConfig};
use dhq::scenes::{generate, DensityTier};

#[test]
fn default_detector_learns_sparse_scenes() {
    let cfg = ModelConfig::default();
    let scenes = generate(&DensityTier::Sparse.params(cfg.grid, 0), 300).unwrap();
    let (tr, val) = scenes.split_at(200);
    let tc = TrainConfig {
        eval_every: TrainConfig::default().epochs,
        ..TrainConfig::default()
    };
    let mut m = Model::new(cfg).unwrap();
    let log = train(&mut m, tr, val, &tc, |_| {}).unwrap();
    let (first, last) = (&log[0], log.last().unwrap());
    let ap = last.ap.unwrap();
    println!(
        "loss {:.4} -> {:.4}, held-out AP@0.5 {ap:.4}",
        first.loss, last.loss
    );
    assert!(first.loss > last.loss);
    assert!(ap >= 0.9, "AP {ap}");
}
