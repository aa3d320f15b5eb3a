use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dhq::assign::{hungarian, CostMatrix};
use dhq::detector::{Model, ModelConfig};
use dhq::scenes::{generate, DensityTier};
use dhq::suppress::{nms, soft_nms};
use dhq::{giou, BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
            )
            .unwrap()
        })
        .collect()
}

fn bench_hungarian(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [8usize, 32, 128] {
        let values: Vec<f64> = (0..n * n / 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = CostMatrix::new(n, n / 2, values).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| hungarian(black_box(m)))
        });
    }
    g.finish();
}

fn bench_suppression(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dets: Vec<Detection> = random_boxes(&mut rng, 300)
        .into_iter()
        .map(|b| Detection::new("img", b, rng.random_range(0.0..1.0)))
        .collect();
    c.bench_function("nms_300", |b| {
        b.iter(|| nms(black_box(&dets), 0.5).unwrap())
    });
    c.bench_function("soft_nms_300", |b| {
        b.iter(|| soft_nms(black_box(&dets), 0.5, 1e-3).unwrap())
    });
}

fn bench_pairwise_giou(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_boxes(&mut rng, 64);
    let b = random_boxes(&mut rng, 64);
    c.bench_function("giou_64x64", |bch| {
        bch.iter(|| {
            let mut s = 0.0;
            for x in &a {
                for y in &b {
                    s += giou(x, y).unwrap();
                }
            }
            black_box(s)
        })
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let scene = &generate(&DensityTier::Dense.params(cfg.grid, 0), 1).unwrap()[0];
    let m = Model::new(cfg).unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    g.bench_function("forward", |b| {
        b.iter(|| m.forward(black_box(scene)).unwrap())
    });
    g.bench_function("loss_and_grads", |b| {
        b.iter(|| m.loss_and_grads(black_box(scene)).unwrap())
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_hungarian,
    bench_suppression,
    bench_pairwise_giou,
    bench_model
);
criterion_main!(benches);
