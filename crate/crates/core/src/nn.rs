//! Parameterized layers over the tape: linear maps, two-layer MLPs, affine
//! layer norm and single-head dot-product attention.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; `forward` takes the
//! per-tape vars produced by [`ParamStore::load`].

use crate::tensor::{DiffTensor, ParamId, ParamStore, Result, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    Xavier,
    Zero,
    /// Identity weight (square only), zero bias.
    Identity,
}

/// `y = x W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = match init {
            Init::Xavier => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..=a))
                    .collect()
            }
            Init::Zero => vec![0.0; fan_in * fan_out],
            Init::Identity => {
                assert_eq!(fan_in, fan_out, "identity init needs a square layer");
                (0..fan_in * fan_out)
                    .map(|k| if k / fan_out == k % fan_out { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        let w = store.insert(
            format!("{name}.w"),
            DiffTensor::matrix(fan_in, fan_out, weights).expect("shape matches"),
        );
        let b = store.insert(format!("{name}.b"), DiffTensor::vector(vec![0.0; fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w.0])?;
        tape.add_row(y, p[self.b.0])
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// `l2(relu(l1(x)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        init1: Init,
        init2: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), fan_in, hidden, init1, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, fan_out, init2, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, p, h)
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.l1.ids(), self.l2.ids()].concat()
    }
}

/// Layer norm over the last axis followed by a learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl AffineNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), DiffTensor::vector(vec![1.0; dim])),
            beta: store.insert(format!("{name}.beta"), DiffTensor::vector(vec![0.0; dim])),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let s = tape.mul_row(n, p[self.gamma.0])?;
        tape.add_row(s, p[self.beta.0])
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Single-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, Init::Xavier, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, Init::Xavier, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, Init::Xavier, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, Init::Xavier, rng),
        }
    }

    /// `query_in: [n, d]`, `key_in` and `value_in: [m, d]` -> `[n, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        query_in: Var,
        key_in: Var,
        value_in: Var,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, query_in)?;
        let k = self.k.forward(tape, p, key_in)?;
        let v = self.v.forward(tape, p, value_in)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / (self.q.fan_out as f64).sqrt())?;
        let a = tape.softmax(logits, 1)?;
        let mixed = tape.matmul(a, v)?;
        self.o.forward(tape, p, mixed)
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.o.param_count()
    }
}
