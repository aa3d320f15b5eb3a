mod common;

use common::{seeded, unit_box};
use dhq::dcg::{ada, apply_to_queries, neighbor_sets, DcgInit, DcgParams};
use dhq::nn::Init;
use dhq::tensor::{finite_diff_check, DiffTensor, ParamStore, Tape};
use dhq::{iou, BBox, DcgSettings, GateDirection, Query};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 4;

fn trained_like(settings: DcgSettings) -> (ParamStore, DcgParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let init = DcgInit {
        id_encoder: Init::Xavier,
        ffn_out: Init::Xavier,
    };
    let p = DcgParams::new(&mut store, "dcg", DIM, settings, init, &mut rng);
    (store, p)
}

fn settings() -> impl Strategy<Value = DcgSettings> {
    (
        0.0..0.5f64,
        0.1..0.9f64,
        prop_oneof![Just(GateDirection::Below), Just(GateDirection::Above)],
    )
        .prop_map(|(c_low, gate_threshold, gate_direction)| DcgSettings {
            c_low,
            gate_threshold,
            gate_direction,
        })
}

/// Queries with confidences from a coarse set so ties occur.
fn queries() -> impl Strategy<Value = Vec<Query>> {
    proptest::collection::vec(
        (
            proptest::collection::vec(-1.0..1.0f64, DIM),
            unit_box(),
            0..10u32,
        ),
        1..9,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(content, ref_box, c)| Query {
                content,
                ref_box,
                confidence: f64::from(c) / 10.0 + 0.05,
                stage: 1,
            })
            .collect()
    })
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(seeded(200))]

    #[test]
    fn permutation_equivariant(qs in queries(), s in settings(), seed in any::<u64>()) {
        let (store, params) = trained_like(s);
        let out = apply_to_queries(&store, &params, &qs).unwrap();
        let perm = permutation(qs.len(), seed);
        let permuted: Vec<Query> = perm.iter().map(|&k| qs[k].clone()).collect();
        let out_p = apply_to_queries(&store, &params, &permuted).unwrap();
        for (pos, &k) in perm.iter().enumerate() {
            for (a, b) in out_p[pos].content.iter().zip(&out[k].content) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neighbor_sets_respect_gates(qs in queries(), s in settings()) {
        let confs: Vec<f64> = qs.iter().map(|q| q.confidence).collect();
        let boxes: Vec<BBox> = qs.iter().map(|q| q.ref_box).collect();
        let sets = neighbor_sets(&confs, &boxes, &s).unwrap();
        for (i, set) in sets.iter().enumerate() {
            for j in 0..qs.len() {
                let o = iou(&boxes[i], &boxes[j]).unwrap();
                let gated = match s.gate_direction {
                    GateDirection::Below => o < s.gate_threshold,
                    GateDirection::Above => o > s.gate_threshold,
                };
                let expected = j != i && confs[j] > confs[i] && confs[j] > s.c_low && gated;
                prop_assert_eq!(set.contains(&j), expected);
                if set.contains(&j) {
                    prop_assert!(!sets[j].contains(&i));
                }
            }
        }
    }

    #[test]
    fn most_confident_query_is_untouched(mut qs in queries(), s in settings(), pick in any::<prop::sample::Index>()) {
        let i = pick.index(qs.len());
        qs[i].confidence = 1.0;
        let (store, params) = trained_like(s);
        let confs: Vec<f64> = qs.iter().map(|q| q.confidence).collect();
        let boxes: Vec<BBox> = qs.iter().map(|q| q.ref_box).collect();
        let sets = neighbor_sets(&confs, &boxes, &s).unwrap();
        prop_assert!(sets[i].is_empty());
        // an empty set contributes a zero q_de, so only the FFN bias acts
        let alone = apply_to_queries(&store, &params, &qs[i..=i]).unwrap();
        let all = apply_to_queries(&store, &params, &qs).unwrap();
        for (a, b) in alone[0].content.iter().zip(&all[i].content) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn below_c_low_gives_no_neighbors(qs in queries(), s in settings()) {
        let confs: Vec<f64> = qs.iter().map(|q| q.confidence * s.c_low).collect();
        let boxes: Vec<BBox> = qs.iter().map(|q| q.ref_box).collect();
        prop_assert!(neighbor_sets(&confs, &boxes, &s).unwrap().iter().all(Vec::is_empty));
    }

    #[test]
    fn tied_identical_queries_stay_identical(q in queries(), n in 2..5usize, s in settings()) {
        let (store, params) = trained_like(s);
        let copies = vec![q[0].clone(); n];
        let out = apply_to_queries(&store, &params, &copies).unwrap();
        for o in &out[1..] {
            prop_assert_eq!(&o.content, &out[0].content);
        }
    }
}

#[test]
fn ada_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = DcgSettings::default();
    for sample in 0..100 {
        use rand::Rng;
        let n = rng.random_range(2..7);
        let confs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    0.2,
                    0.2,
                )
                .unwrap()
            })
            .collect();
        let sets = neighbor_sets(&confs, &boxes, &s).unwrap();
        // distinct multiples of 0.01 keep every max-pool winner isolated
        let mut vals: Vec<f64> = (0..n * DIM).map(|k| k as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        let x = DiffTensor::matrix(n, DIM, vals).unwrap();
        let w: Vec<f64> = (0..n * DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = finite_diff_check(
            |t: &mut Tape, v| {
                let y =
                    ada(t, v, &sets).map_err(|e| dhq::tensor::TensorError::InvalidArgument {
                        op: "ada",
                        msg: e.to_string(),
                    })?;
                let wv = t.constant(DiffTensor::matrix(n, DIM, w.clone())?);
                let m = t.mul(y, wv)?;
                t.sum(m)
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "sample {sample}: {:.3e}", r.max_rel_error);
    }
}
