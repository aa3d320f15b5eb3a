#![allow(dead_code)]

use dhq::BBox;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

/// Fixed-seed proptest configuration, so every run sees the same cases.
pub fn seeded(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x0d15_ea5e),
        failure_persistence: None,
        ..Config::default()
    }
}

/// A box well inside the unit square.
pub fn unit_box() -> impl Strategy<Value = BBox> {
    (0.15..0.85f64, 0.15..0.85f64, 0.02..0.3f64, 0.02..0.3f64)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
}
