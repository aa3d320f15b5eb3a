mod common;

use common::seeded;
use dhq::loss::{
    bce, equilibrium_sim, fl_giou_cls, giou_aware_weight, pair_loss, pair_loss_grad, ClassTarget,
    GiouAwareOptions, OmegaForm,
};
use proptest::prelude::*;
use std::f64::consts::LN_2;

fn omega_form() -> impl Strategy<Value = OmegaForm> {
    prop_oneof![Just(OmegaForm::Agreement), Just(OmegaForm::AbsDifference)]
}

proptest! {
    #![proptest_config(seeded(500))]

    #[test]
    fn omega_in_unit_interval(p in 0.0..=1.0f64, g in 0.0..=1.0f64, gamma in 0.1..5.0f64, form in omega_form()) {
        let w = giou_aware_weight(p, g, gamma, form).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn losses_non_negative(p in 0.0..=1.0f64, g in -1.0..=1.0f64, gamma in 0.1..5.0f64, form in omega_form(), pos: bool) {
        let opts = GiouAwareOptions { gamma, clamp_giou: true, omega: form };
        let target = if pos { ClassTarget::Positive { giou: g } } else { ClassTarget::Negative };
        prop_assert!(fl_giou_cls(p, target, &opts).unwrap() >= 0.0);
        prop_assert!(bce(p, pos).unwrap() >= 0.0);
    }

    #[test]
    fn pair_loss_gradient_is_tied_derivative(p in 0.01..0.99f64) {
        let h = 1e-6;
        let numeric = (pair_loss(p + h, p + h).unwrap() - pair_loss(p - h, p - h).unwrap()) / (2.0 * h);
        prop_assert!((pair_loss_grad(p).unwrap() - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
    }
}

#[test]
fn tied_gradient_vanishes_at_half() {
    assert_eq!(pair_loss_grad(0.5).unwrap(), 0.0);
}

/// Twenty initial confidences spread over (0.05, 0.95).
fn inits() -> impl Iterator<Item = f64> {
    (0..20).map(|k| 0.05 + 0.9 * (k as f64 + 0.5) / 20.0)
}

#[test]
fn tied_queries_settle_at_half() {
    for p0 in inits() {
        let t = equilibrium_sim(p0, false, 0.1, 500).unwrap();
        assert!(
            (t.final_p.0 - 0.5).abs() < 0.02,
            "init {p0}: {:?}",
            t.final_p
        );
        assert_eq!(t.final_p.0, t.final_p.1);
        assert!(pair_loss(t.final_p.0, t.final_p.1).unwrap() >= 2.0 * LN_2 - 1e-3);
    }
}

#[test]
fn differentiated_queries_separate() {
    for p0 in inits() {
        let t = equilibrium_sim(p0, true, 0.1, 500).unwrap();
        let (p1, p2) = t.final_p;
        assert!(p1 > 0.9 && p2 < 0.1, "init {p0}: {p1} {p2}");
        assert!(pair_loss(p1, p2).unwrap() < 2.0 * LN_2);
    }
}
