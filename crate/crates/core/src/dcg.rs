//! De-homogenizing query coding: per-query identity encodings, asymmetric
//! difference aggregation over higher-confidence neighbors, and additive
//! composition back into the query content.

use crate::boxgeom::{iou, BBox, GeomError};
use crate::nn::{Init, Mlp2};
use crate::tensor::{DiffTensor, ParamStore, Tape, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DcgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("invalid setting: {0}")]
    Setting(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

pub type Result<T, E = DcgError> = std::result::Result<T, E>;

/// A decoder query: content vector, reference box and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub content: Vec<f64>,
    pub ref_box: BBox,
    pub confidence: f64,
    pub stage: usize,
}

/// Which side of the IoU threshold a neighbor must fall on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDirection {
    /// `IoU(b_j, b_i) < threshold`.
    #[default]
    Below,
    /// `IoU(b_j, b_i) > threshold`.
    Above,
}

impl std::str::FromStr for GateDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "below" => Ok(Self::Below),
            "above" => Ok(Self::Above),
            _ => Err(format!(
                "unknown gate direction {s:?} (expected below|above)"
            )),
        }
    }
}

impl std::fmt::Display for GateDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Below => "below",
            Self::Above => "above",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcgSettings {
    pub c_low: f64,
    pub gate_threshold: f64,
    pub gate_direction: GateDirection,
}

impl Default for DcgSettings {
    fn default() -> Self {
        Self {
            c_low: 0.1,
            gate_threshold: 0.5,
            gate_direction: GateDirection::Below,
        }
    }
}

impl DcgSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.c_low) {
            return Err(DcgError::Setting(format!(
                "c_low {} outside [0, 1)",
                self.c_low
            )));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(DcgError::Setting(format!(
                "gate_threshold {} outside (0, 1)",
                self.gate_threshold
            )));
        }
        Ok(())
    }

    fn gate(&self, overlap: f64) -> bool {
        match self.gate_direction {
            GateDirection::Below => overlap < self.gate_threshold,
            GateDirection::Above => overlap > self.gate_threshold,
        }
    }
}

/// Weights of the identity encoder `H` and the composition FFN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcgParams {
    pub id_encoder: Mlp2,
    pub ffn: Mlp2,
    pub settings: DcgSettings,
    pub dim: usize,
}

/// How the DCG weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcgInit {
    pub id_encoder: Init,
    /// Init of the FFN output layer; `Zero` makes composition start as the identity.
    pub ffn_out: Init,
}

impl Default for DcgInit {
    fn default() -> Self {
        Self {
            id_encoder: Init::Xavier,
            ffn_out: Init::Zero,
        }
    }
}

impl DcgParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        settings: DcgSettings,
        init: DcgInit,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            id_encoder: Mlp2::new(
                store,
                &format!("{name}.id"),
                dim,
                dim,
                dim,
                init.id_encoder,
                init.id_encoder,
                rng,
            ),
            ffn: Mlp2::new(
                store,
                &format!("{name}.ffn"),
                dim,
                dim,
                dim,
                Init::Xavier,
                init.ffn_out,
                rng,
            ),
            settings,
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.id_encoder.param_count() + self.ffn.param_count()
    }

    fn check(&self, tape: &Tape, x: Var) -> Result<usize> {
        match *tape.shape(x) {
            [n, d] if d == self.dim => Ok(n),
            [_, d] => Err(DcgError::Dimension {
                expected: self.dim,
                got: d,
            }),
            _ => Err(DcgError::Misaligned(format!(
                "expected [n, {}] content",
                self.dim
            ))),
        }
    }
}

/// `LN(H(q))` for each row of `content: [n, d]`.
pub fn dehomo_id(tape: &mut Tape, p: &[Var], params: &DcgParams, content: Var) -> Result<Var> {
    params.check(tape, content)?;
    let h = params.id_encoder.forward(tape, p, content)?;
    Ok(tape.layer_norm(h)?)
}

/// For each query, the higher-confidence gated neighbors it is contrasted with.
pub fn neighbor_sets(
    confs: &[f64],
    boxes: &[BBox],
    settings: &DcgSettings,
) -> Result<Vec<Vec<usize>>> {
    if confs.len() != boxes.len() {
        return Err(DcgError::Misaligned(format!(
            "{} confidences for {} boxes",
            confs.len(),
            boxes.len()
        )));
    }
    let n = confs.len();
    let mut out = vec![Vec::new(); n];
    for (i, set) in out.iter_mut().enumerate() {
        for j in 0..n {
            if j == i || !(confs[j] > confs[i]) || !(confs[j] > settings.c_low) {
                continue;
            }
            if settings.gate(iou(&boxes[j], &boxes[i])?) {
                set.push(j);
            }
        }
    }
    Ok(out)
}

/// Elementwise max over `{ids_i - ids_j : j in neighbors[i]}`; zero rows for
/// empty sets.
pub fn ada(tape: &mut Tape, ids: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
    let (n, d) = match *tape.shape(ids) {
        [n, d] => (n, d),
        _ => return Err(DcgError::Misaligned("ids must be a matrix".into())),
    };
    if neighbors.len() != n {
        return Err(DcgError::Misaligned(format!(
            "{} neighbor sets for {n} ids",
            neighbors.len()
        )));
    }
    if neighbors.iter().all(Vec::is_empty) {
        return Ok(tape.constant(DiffTensor::zeros(vec![n, d])));
    }
    let mut rows = Vec::with_capacity(n);
    for (i, set) in neighbors.iter().enumerate() {
        if set.is_empty() {
            rows.push(tape.constant(DiffTensor::zeros(vec![d])));
            continue;
        }
        let own = tape.gather_rows(ids, &vec![i; set.len()])?;
        let others = tape.gather_rows(ids, set)?;
        let diff = tape.sub(own, others)?;
        rows.push(tape.max_pool_set(diff)?);
    }
    Ok(tape.stack(&rows, d)?)
}

/// `content + ffn(q_de)`.
pub fn compose(
    tape: &mut Tape,
    p: &[Var],
    params: &DcgParams,
    content: Var,
    q_de: Var,
) -> Result<Var> {
    let n = params.check(tape, content)?;
    if params.check(tape, q_de)? != n {
        return Err(DcgError::Misaligned(
            "content and q_de row counts differ".into(),
        ));
    }
    let f = params.ffn.forward(tape, p, q_de)?;
    Ok(tape.add(content, f)?)
}

/// Result of one DCG pass.
#[derive(Debug, Clone, Copy)]
pub struct DcgOutput {
    pub ids: Var,
    pub q_de: Var,
    pub composed: Var,
}

/// Full DCG on `content: [n, d]` with detached confidences and boxes.
pub fn dcg_forward(
    tape: &mut Tape,
    p: &[Var],
    params: &DcgParams,
    content: Var,
    confs: &[f64],
    boxes: &[BBox],
) -> Result<(DcgOutput, Vec<Vec<usize>>)> {
    let n = params.check(tape, content)?;
    if confs.len() != n {
        return Err(DcgError::Misaligned(format!(
            "{} confidences for {n} queries",
            confs.len()
        )));
    }
    let neighbors = neighbor_sets(confs, boxes, &params.settings)?;
    let ids = dehomo_id(tape, p, params, content)?;
    let q_de = ada(tape, ids, &neighbors)?;
    let composed = compose(tape, p, params, content, q_de)?;
    Ok((
        DcgOutput {
            ids,
            q_de,
            composed,
        },
        neighbors,
    ))
}

/// Applies DCG to plain queries without recording gradients.
pub fn apply_to_queries(
    store: &ParamStore,
    params: &DcgParams,
    queries: &[Query],
) -> Result<Vec<Query>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = store.load(&mut tape, false);
    let mut flat = Vec::with_capacity(queries.len() * params.dim);
    for q in queries {
        if q.content.len() != params.dim {
            return Err(DcgError::Dimension {
                expected: params.dim,
                got: q.content.len(),
            });
        }
        flat.extend_from_slice(&q.content);
    }
    let content = tape.constant(DiffTensor::matrix(queries.len(), params.dim, flat)?);
    let confs: Vec<f64> = queries.iter().map(|q| q.confidence).collect();
    let boxes: Vec<BBox> = queries.iter().map(|q| q.ref_box).collect();
    let (out, _) = dcg_forward(&mut tape, &p, params, content, &confs, &boxes)?;
    Ok(queries
        .iter()
        .zip(tape.value(out.composed).chunks(params.dim))
        .map(|(q, c)| Query {
            content: c.to_vec(),
            ..q.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(dim: usize, init: DcgInit, settings: DcgSettings) -> (ParamStore, DcgParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DcgParams::new(&mut store, "dcg", dim, settings, init, &mut rng);
        (store, p)
    }

    fn boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| BBox::new(0.1 + 0.3 * i as f64, 0.5, 0.1, 0.1).unwrap())
            .collect()
    }

    #[test]
    fn identity_encoder_hand_layer_norm() {
        let init = DcgInit {
            id_encoder: Init::Identity,
            ffn_out: Init::Zero,
        };
        let (store, dp) = params(4, init, DcgSettings::default());
        let mut t = Tape::new();
        let p = store.load(&mut t, false);
        let x = t.constant(DiffTensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = dehomo_id(&mut t, &p, &dp, x).unwrap();
        let sd = (1.25f64 + crate::tensor::LAYER_NORM_EPS).sqrt();
        for (got, x) in t.value(e).iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((got - (x - 2.5) / sd).abs() < 1e-12);
        }
        assert!((t.value(e)[0] + 1.3416).abs() < 1e-4);
        assert!((t.value(e)[2] - 0.4472).abs() < 1e-4);
    }

    #[test]
    fn dehomo_id_is_normalized() {
        let (store, dp) = params(6, DcgInit::default(), DcgSettings::default());
        let mut t = Tape::new();
        let p = store.load(&mut t, false);
        let vals: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
        let x = t.constant(DiffTensor::matrix(2, 6, vals).unwrap());
        let e = dehomo_id(&mut t, &p, &dp, x).unwrap();
        for row in t.value(e).chunks(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (store, dp) = params(4, DcgInit::default(), DcgSettings::default());
        let mut t = Tape::new();
        let p = store.load(&mut t, false);
        let x = t.constant(DiffTensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        assert!(matches!(
            dehomo_id(&mut t, &p, &dp, x),
            Err(DcgError::Dimension {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn ada_hand_example() {
        let mut t = Tape::new();
        let ids =
            t.constant(DiffTensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap());
        let settings = DcgSettings {
            c_low: 0.1,
            gate_threshold: 0.5,
            gate_direction: GateDirection::Below,
        };
        let n = neighbor_sets(&[0.9, 0.8, 0.7], &boxes(3), &settings).unwrap();
        assert_eq!(n, vec![vec![], vec![0], vec![0, 1]]);
        let q = ada(&mut t, ids, &n).unwrap();
        assert_eq!(&t.value(q)[4..], &[-1.0, 0.0]);
        // highest-confidence query gets zero
        assert_eq!(&t.value(q)[..2], &[0.0, 0.0]);
        assert_eq!(&t.value(q)[2..4], &[-1.0, 1.0]);
    }

    #[test]
    fn single_query_and_low_confidence_give_zero() {
        let s = DcgSettings::default();
        assert_eq!(
            neighbor_sets(&[0.7], &boxes(1), &s).unwrap(),
            vec![Vec::<usize>::new()]
        );
        let n = neighbor_sets(&[0.05, 0.08, 0.02], &boxes(3), &s).unwrap();
        assert!(n.iter().all(Vec::is_empty));
    }

    #[test]
    fn gate_direction_and_strictness() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let below = DcgSettings::default();
        let above = DcgSettings {
            gate_direction: GateDirection::Above,
            ..below
        };
        // identical boxes: IoU 1
        assert!(neighbor_sets(&[0.9, 0.5], &[b, b], &below).unwrap()[1].is_empty());
        assert_eq!(
            neighbor_sets(&[0.9, 0.5], &[b, b], &above).unwrap()[1],
            vec![0]
        );
        // tied confidences: neither sees the other
        let n = neighbor_sets(&[0.6, 0.6], &[b, b], &above).unwrap();
        assert!(n.iter().all(Vec::is_empty));
        assert!(neighbor_sets(&[0.6], &[b, b], &above).is_err());
    }

    #[test]
    fn compose_zero_ffn_is_identity() {
        let (store, dp) = params(3, DcgInit::default(), DcgSettings::default());
        let mut t = Tape::new();
        let p = store.load(&mut t, false);
        let c = t.constant(DiffTensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.5, 0.5]).unwrap());
        let q_de =
            t.constant(DiffTensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let out = compose(&mut t, &p, &dp, c, q_de).unwrap();
        assert_eq!(t.value(out), t.value(c));
    }

    #[test]
    fn compose_differentiates_equal_contents() {
        let init = DcgInit {
            id_encoder: Init::Xavier,
            ffn_out: Init::Xavier,
        };
        let (store, dp) = params(3, init, DcgSettings::default());
        let mut t = Tape::new();
        let p = store.load(&mut t, false);
        let c = t.constant(DiffTensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap());
        let q_de =
            t.constant(DiffTensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let out = compose(&mut t, &p, &dp, c, q_de).unwrap();
        let v = t.value(out);
        assert_ne!(&v[..3], &v[3..]);
    }

    #[test]
    fn tied_identical_queries_stay_identical() {
        let init = DcgInit {
            id_encoder: Init::Xavier,
            ffn_out: Init::Xavier,
        };
        let (store, dp) = params(4, init, DcgSettings::default());
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let q = Query {
            content: vec![0.1, 0.2, -0.3, 0.4],
            ref_box: b,
            confidence: 0.7,
            stage: 1,
        };
        let out = apply_to_queries(&store, &dp, &[q.clone(), q]).unwrap();
        assert_eq!(out[0].content, out[1].content);
    }

    #[test]
    fn compose_gradient_reaches_both_inputs() {
        let init = DcgInit {
            id_encoder: Init::Xavier,
            ffn_out: Init::Xavier,
        };
        let (store, dp) = params(3, init, DcgSettings::default());
        let x = DiffTensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap();
        for which in 0..2 {
            let r = finite_diff_check(
                |tape, v| {
                    let p = store.load(tape, false);
                    let other = tape.constant(
                        DiffTensor::matrix(2, 3, vec![0.2, 0.4, -0.1, 0.9, 0.3, 0.2]).unwrap(),
                    );
                    let (c, q) = if which == 0 { (v, other) } else { (other, v) };
                    let out = compose(tape, &p, &dp, c, q).map_err(|e| match e {
                        DcgError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
                    let sq = tape.mul(out, out)?;
                    tape.sum(sq)
                },
                &x,
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(r.passed, "input {which}: {}", r.max_rel_error);
            assert!(r.analytic.iter().any(|g| g.abs() > 1e-8));
        }
    }
}
