//! Central finite differences against backprop for every primitive op and
//! every loss, 100 seeded inputs each.

use dhq::boxgeom::{tape_giou, BBox};
use dhq::loss::{
    box_loss, decoder_cls_loss, pair_loss, pair_loss_grad, tape_bce, tape_fl_giou_cls, BoxWeights,
    ClassTarget, GiouAwareOptions, OmegaForm,
};
use dhq::tensor::{finite_diff_check, DiffTensor, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAMPLES: u64 = 100;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6ead_0000 + tag)
}

/// Uniform in `±[lo, hi]`, keeping clear of kinks at zero.
fn away(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = r.random_range(lo..hi);
    if r.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DiffTensor {
    DiffTensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn weighted_sum(t: &mut Tape, y: Var, w: &[f64]) -> Result<Var> {
    let wv = t.constant(DiffTensor::new(t.shape(y).to_vec(), w.to_vec())?);
    let m = t.mul(y, wv)?;
    t.sum(m)
}

fn check(name: &str, sample: u64, x: &DiffTensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let r = finite_diff_check(f, x, EPS, TOL).unwrap();
    assert!(
        r.passed,
        "{name} sample {sample}: max rel err {:.3e}\nanalytic {:?}\nnumeric {:?}",
        r.max_rel_error, r.analytic, r.numeric
    );
}

/// Runs `f(sample, rng)` for every sample, where `f` builds the input and
/// the function and checks it.
fn suite(tag: u64, mut f: impl FnMut(u64, &mut ChaCha8Rng)) {
    let mut r = rng(tag);
    for s in 0..SAMPLES {
        f(s, &mut r);
    }
}

fn unary(
    name: &str,
    tag: u64,
    gen: impl Fn(&mut ChaCha8Rng) -> f64,
    op: impl Fn(&mut Tape, Var) -> Result<Var>,
) {
    suite(tag, |s, r| {
        let x = DiffTensor::matrix(2, 3, (0..6).map(|_| gen(r)).collect()).unwrap();
        let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        check(name, s, &x, |t, v| {
            let y = op(t, v)?;
            weighted_sum(t, y, &w)
        });
    });
}

#[test]
fn elementwise_unary_ops() {
    unary("neg", 1, |r| r.random_range(-2.0..2.0), |t, v| t.neg(v));
    unary(
        "scale",
        2,
        |r| r.random_range(-2.0..2.0),
        |t, v| t.scale(v, -1.7),
    );
    unary(
        "add_scalar",
        3,
        |r| r.random_range(-2.0..2.0),
        |t, v| t.add_scalar(v, 0.3),
    );
    unary("relu", 4, |r| away(r, 0.05, 2.0), |t, v| t.relu(v));
    unary(
        "sigmoid",
        5,
        |r| r.random_range(-4.0..4.0),
        |t, v| t.sigmoid(v),
    );
    unary("log", 6, |r| r.random_range(0.2..3.0), |t, v| t.log(v));
    unary("exp", 7, |r| r.random_range(-2.0..2.0), |t, v| t.exp(v));
    unary("abs", 8, |r| away(r, 0.05, 2.0), |t, v| t.abs(v));
    unary(
        "powf",
        9,
        |r| r.random_range(0.2..2.0),
        |t, v| t.powf(v, 2.5),
    );
    unary(
        "clamp",
        10,
        |r| away(r, 0.05, 0.45) + 0.5,
        |t, v| t.clamp(v, 0.0, 1.0),
    );
}

fn binary(
    name: &str,
    tag: u64,
    gen: impl Fn(&mut ChaCha8Rng) -> (f64, f64),
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
) {
    suite(tag, |s, r| {
        let pairs: Vec<(f64, f64)> = (0..6).map(|_| gen(r)).collect();
        let a = DiffTensor::matrix(2, 3, pairs.iter().map(|p| p.0).collect()).unwrap();
        let b = DiffTensor::matrix(2, 3, pairs.iter().map(|p| p.1).collect()).unwrap();
        let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        check(&format!("{name} (left)"), s, &a, |t, v| {
            let other = t.constant(b.clone());
            let y = op(t, v, other)?;
            weighted_sum(t, y, &w)
        });
        check(&format!("{name} (right)"), s, &b, |t, v| {
            let other = t.constant(a.clone());
            let y = op(t, other, v)?;
            weighted_sum(t, y, &w)
        });
    });
}

#[test]
fn elementwise_binary_ops() {
    let free = |r: &mut ChaCha8Rng| (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    binary("add", 11, free, |t, a, b| t.add(a, b));
    binary("sub", 12, free, |t, a, b| t.sub(a, b));
    binary("mul", 13, free, |t, a, b| t.mul(a, b));
    binary(
        "div",
        14,
        |r| (r.random_range(-2.0..2.0), away(r, 0.3, 2.0)),
        |t, a, b| t.div(a, b),
    );
    let apart = |r: &mut ChaCha8Rng| {
        let a = r.random_range(-2.0..2.0);
        (a, a + away(r, 0.05, 1.0))
    };
    binary("minimum", 15, apart, |t, a, b| t.minimum(a, b));
    binary("maximum", 16, apart, |t, a, b| t.maximum(a, b));
}

#[test]
fn matrix_ops() {
    suite(20, |s, r| {
        let (m, k, n) = (
            r.random_range(1..5),
            r.random_range(1..5),
            r.random_range(1..5),
        );
        let a = mat(r, m, k);
        let b = mat(r, k, n);
        let w: Vec<f64> = (0..m * n).map(|_| r.random_range(-1.0..1.0)).collect();
        check("matmul (left)", s, &a, |t, v| {
            let bv = t.constant(b.clone());
            let y = t.matmul(v, bv)?;
            weighted_sum(t, y, &w)
        });
        check("matmul (right)", s, &b, |t, v| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, v)?;
            weighted_sum(t, y, &w)
        });
        let wt: Vec<f64> = (0..m * k).map(|_| r.random_range(-1.0..1.0)).collect();
        check("transpose", s, &a, |t, v| {
            let y = t.transpose(v)?;
            let y = t.transpose(y)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, &wt)
        });
    });
}

#[test]
fn row_ops() {
    suite(21, |s, r| {
        let a = mat(r, 3, 4);
        let row = mat(r, 1, 4);
        let row = DiffTensor::vector(row.values().to_vec());
        let w: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        for (name, mul) in [("add_row", false), ("mul_row", true)] {
            check(&format!("{name} (matrix)"), s, &a, |t, v| {
                let rv = t.constant(row.clone());
                let y = if mul {
                    t.mul_row(v, rv)?
                } else {
                    t.add_row(v, rv)?
                };
                weighted_sum(t, y, &w)
            });
            check(&format!("{name} (row)"), s, &row, |t, v| {
                let av = t.constant(a.clone());
                let y = if mul {
                    t.mul_row(av, v)?
                } else {
                    t.add_row(av, v)?
                };
                weighted_sum(t, y, &w)
            });
        }
    });
}

#[test]
fn normalizing_ops() {
    suite(22, |s, r| {
        let a = mat(r, 3, 5);
        let w: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        check("softmax axis 1", s, &a, |t, v| {
            let y = t.softmax(v, 1)?;
            weighted_sum(t, y, &w)
        });
        check("softmax axis 0", s, &a, |t, v| {
            let y = t.softmax(v, 0)?;
            weighted_sum(t, y, &w)
        });
        check("layer_norm", s, &a, |t, v| {
            let y = t.layer_norm(v)?;
            weighted_sum(t, y, &w)
        });
        check("mean", s, &a, |t, v| {
            let y = t.mul(v, v)?;
            t.mean(y)
        });
    });
}

#[test]
fn max_pool_set_op() {
    suite(23, |s, r| {
        // Column values kept well apart so the arg-max is stable under eps.
        let rows = r.random_range(1..5);
        let cols = 3;
        let mut vals = vec![0.0; rows * cols];
        for c in 0..cols {
            let mut col: Vec<f64> = (0..rows)
                .map(|k| k as f64 * 0.2 + r.random_range(0.0..0.1))
                .collect();
            for i in (1..col.len()).rev() {
                col.swap(i, r.random_range(0..=i));
            }
            for (k, v) in col.into_iter().enumerate() {
                vals[k * cols + c] = v;
            }
        }
        let a = DiffTensor::matrix(rows, cols, vals).unwrap();
        let w: Vec<f64> = (0..cols).map(|_| r.random_range(-1.0..1.0)).collect();
        check("max_pool_set", s, &a, |t, v| {
            let y = t.max_pool_set(v)?;
            weighted_sum(t, y, &w)
        });
    });
}

#[test]
fn structural_ops() {
    suite(24, |s, r| {
        let a = mat(r, 4, 3);
        let w: Vec<f64> = (0..24).map(|_| r.random_range(-1.0..1.0)).collect();
        check("concat", s, &a, |t, v| {
            let sq = t.mul(v, v)?;
            let y = t.concat(&[v, sq], 1)?;
            weighted_sum(t, y, &w)
        });
        check("stack", s, &a, |t, v| {
            let rows: Vec<Var> = (0..4)
                .map(|k| {
                    let row = t.slice(v, 0, k, 1)?;
                    t.reshape(row, vec![3])
                })
                .collect::<Result<_>>()?;
            let y = t.stack(&[rows[2], rows[0]], 3)?;
            weighted_sum(t, y, &w[..6])
        });
        let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        check("gather_rows", s, &a, |t, v| {
            let y = t.gather_rows(v, &idx)?;
            weighted_sum(t, y, &w[..15])
        });
        check("slice+reshape", s, &a, |t, v| {
            let y = t.slice(v, 1, 1, 2)?;
            let y = t.reshape(y, vec![2, 4])?;
            let y = t.exp(y)?;
            weighted_sum(t, y, &w[..8])
        });
    });
}

#[test]
fn shared_leaf_accumulates() {
    suite(25, |s, r| {
        let a = mat(r, 2, 2);
        check("x*x + exp(x)", s, &a, |t, v| {
            let sq = t.mul(v, v)?;
            let e = t.exp(v)?;
            let y = t.add(sq, e)?;
            t.sum(y)
        });
    });
}

fn probs(r: &mut ChaCha8Rng, n: usize) -> DiffTensor {
    DiffTensor::vector((0..n).map(|_| r.random_range(0.05..0.95)).collect())
}

#[test]
fn bce_gradient() {
    suite(30, |s, r| {
        let p = probs(r, 5);
        let labels: Vec<bool> = (0..5).map(|_| r.random_bool(0.5)).collect();
        check("bce", s, &p, |t, v| Ok(tape_bce(t, v, &labels).unwrap()));
    });
}

#[test]
fn pair_loss_gradient() {
    // The two queries share one parameter p: d/dp pair_loss(p, p).
    suite(31, |s, r| {
        let p = r.random_range(0.02..0.98);
        let h = 1e-6;
        let numeric =
            (pair_loss(p + h, p + h).unwrap() - pair_loss(p - h, p - h).unwrap()) / (2.0 * h);
        let analytic = pair_loss_grad(p).unwrap();
        assert!(
            (numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0),
            "sample {s}: p {p} analytic {analytic} numeric {numeric}"
        );
        let x = DiffTensor::vector(vec![p, p]);
        check("pair_loss on tape", s, &x, |t, v| {
            let labels = [true, false];
            Ok(tape_bce(t, v, &labels).unwrap())
        });
    });
}

#[test]
fn fl_giou_cls_gradient_wrt_logit() {
    suite(32, |s, r| {
        let n = 4;
        let logits = DiffTensor::vector((0..n).map(|_| r.random_range(-3.0..3.0)).collect());
        let gamma = r.random_range(0.5..3.0);
        let targets: Vec<ClassTarget> = (0..n)
            .map(|_| {
                if r.random_bool(0.5) {
                    ClassTarget::Positive {
                        giou: r.random_range(0.05..0.95),
                    }
                } else {
                    ClassTarget::Negative
                }
            })
            .collect();
        for omega in [OmegaForm::Agreement, OmegaForm::AbsDifference] {
            let opts = GiouAwareOptions {
                gamma,
                omega,
                ..GiouAwareOptions::default()
            };
            // |p - g| has a kink at p = g; skip samples that sit on it.
            if omega == OmegaForm::AbsDifference
                && targets
                    .iter()
                    .zip(logits.values())
                    .any(|(tg, &z)| match tg {
                        ClassTarget::Positive { giou } => {
                            (dhq::tensor::sigmoid(z) - giou).abs() < 1e-3
                        }
                        ClassTarget::Negative => false,
                    })
            {
                continue;
            }
            check(&format!("fl_giou_cls {omega:?}"), s, &logits, |t, v| {
                let p = t.sigmoid(v)?;
                Ok(tape_fl_giou_cls(t, p, &targets, &opts).unwrap())
            });
        }
    });
}

fn random_box(r: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        r.random_range(0.2..0.8),
        r.random_range(0.2..0.8),
        r.random_range(0.05..0.4),
        r.random_range(0.05..0.4),
    )
    .unwrap()
}

/// True when no corner coordinate of `a` is within `gap` of one of `b`,
/// so min/max and L1 kinks stay outside the difference stencil.
fn kink_free(a: &BBox, b: &BBox, gap: f64) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    let xs = [ca[0], ca[2], cb[0], cb[2]];
    let ys = [ca[1], ca[3], cb[1], cb[3]];
    let sep = |v: &[f64; 4]| (0..4).all(|i| (0..i).all(|j| (v[i] - v[j]).abs() > gap));
    sep(&xs)
        && sep(&ys)
        && a.to_array()
            .iter()
            .zip(b.to_array())
            .all(|(x, y)| (x - y).abs() > gap)
}

#[test]
fn box_loss_gradient() {
    let mut r = rng(33);
    let mut done = 0;
    while done < SAMPLES {
        let pred = random_box(&mut r);
        let tgt = random_box(&mut r);
        if !kink_free(&pred, &tgt, 1e-3) {
            continue;
        }
        let x = DiffTensor::matrix(1, 4, pred.to_array().to_vec()).unwrap();
        check("box_loss", done, &x, |t, v| {
            Ok(box_loss(t, v, &[tgt], BoxWeights::default()).unwrap())
        });
        check("giou", done, &x, |t, v| {
            let tv = t.constant(DiffTensor::matrix(1, 4, tgt.to_array().to_vec())?);
            let g = tape_giou(t, v, tv)?;
            t.sum(g)
        });
        done += 1;
    }
}

#[test]
fn decoder_cls_loss_gradient() {
    suite(34, |s, r| {
        let logits = DiffTensor::vector((0..6).map(|_| r.random_range(-3.0..3.0)).collect());
        let labels: Vec<bool> = (0..6).map(|_| r.random_bool(0.3)).collect();
        check("decoder_cls_loss", s, &logits, |t, v| {
            let p = t.sigmoid(v)?;
            Ok(decoder_cls_loss(t, p, &labels).unwrap())
        });
    });
}
