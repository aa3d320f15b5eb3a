//! Classification and box losses, the GIoU-aware focal loss, and the
//! two-query equilibrium simulator.
//!
//! Scalar functions operate on plain `f64`. The `tape_*` variants build the
//! same formulas on a [`Tape`] over probability tensors so that gradients can
//! flow into a model.

use crate::assign::Assignment;
use crate::boxgeom::{self, giou, BBox, GeomError};
use crate::tensor::{self, sigmoid, DiffTensor, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside every log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("gamma must be positive, got {0}")]
    Gamma(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("prediction {index} of {len} referenced by the assignment")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("equilibrium simulation diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

type Result<T> = std::result::Result<T, LossError>;

fn check_prob(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LossError::Probability(p));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Binary cross-entropy `-[y log p + (1 - y) log(1 - p)]`.
pub fn bce(p: f64, y: bool) -> Result<f64> {
    let p = check_prob(p)?;
    Ok(if y { -p.ln() } else { -(1.0 - p).ln() })
}

/// Total loss of a matched query with confidence `p1` and an unmatched one
/// with confidence `p2`: `-[log p1 + log(1 - p2)]`.
pub fn pair_loss(p1: f64, p2: f64) -> Result<f64> {
    Ok(bce(p1, true)? + bce(p2, false)?)
}

/// `d/dp` of [`pair_loss`] when both queries share one confidence `p`.
pub fn pair_loss_grad(p: f64) -> Result<f64> {
    let p = check_prob(p)?;
    Ok(1.0 / (1.0 - p) - 1.0 / p)
}

/// Classification target of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClassTarget {
    /// Matched to a ground truth whose GIoU with the predicted box is given.
    Positive {
        giou: f64,
    },
    Negative,
}

/// Which modulating weight to use in the GIoU-aware loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaForm {
    /// `(p * g + (1 - p) * (1 - g))^gamma`.
    #[default]
    Agreement,
    /// `|p - g|^gamma`.
    AbsDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GiouAwareOptions {
    pub gamma: f64,
    /// Clamp the GIoU target to `[0, 1]` before it enters the loss.
    pub clamp_giou: bool,
    pub omega: OmegaForm,
}

impl Default for GiouAwareOptions {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            clamp_giou: true,
            omega: OmegaForm::Agreement,
        }
    }
}

impl GiouAwareOptions {
    fn target_giou(&self, target: ClassTarget) -> (bool, f64) {
        match target {
            ClassTarget::Positive { giou } if self.clamp_giou => (true, giou.clamp(0.0, 1.0)),
            ClassTarget::Positive { giou } => (true, giou),
            // Negatives have no matched box; their weight uses a zero GIoU.
            ClassTarget::Negative => (false, 0.0),
        }
    }
}

/// Modulating weight `omega` for prediction `p` and localization quality `giou`.
pub fn giou_aware_weight(p: f64, giou: f64, gamma: f64, form: OmegaForm) -> Result<f64> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(LossError::Gamma(gamma));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(LossError::Probability(p));
    }
    let base = match form {
        OmegaForm::Agreement => p * giou + (1.0 - p) * (1.0 - giou),
        OmegaForm::AbsDifference => (p - giou).abs(),
    };
    Ok(base.max(0.0).powf(gamma))
}

/// GIoU-aware focal classification loss for one prediction.
///
/// Positive: `-g * omega * log p`; negative: `-omega * log(1 - p)`.
pub fn fl_giou_cls(p: f64, target: ClassTarget, opts: &GiouAwareOptions) -> Result<f64> {
    let pc = check_prob(p)?;
    let (positive, g) = opts.target_giou(target);
    let w = giou_aware_weight(pc, g, opts.gamma, opts.omega)?;
    Ok(if positive {
        -g * w * pc.ln()
    } else {
        -w * (1.0 - pc).ln()
    })
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Sigmoid focal loss with discrete targets.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> Result<f64> {
    let pc = check_prob(p)?;
    Ok(if positive {
        -alpha * (1.0 - pc).powf(gamma) * pc.ln()
    } else {
        -(1.0 - alpha) * pc.powf(gamma) * (1.0 - pc).ln()
    })
}

fn clamp_probs(tape: &mut Tape, probs: Var) -> tensor::Result<Var> {
    tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
}

/// `log p` and `log(1 - p)` of clamped probabilities.
fn log_pair(tape: &mut Tape, pc: Var) -> tensor::Result<(Var, Var)> {
    let log_p = tape.log(pc)?;
    let neg = tape.scale(pc, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus)?;
    Ok((log_p, log_q))
}

fn vector_len(tape: &Tape, v: Var, n: usize, op: &str) -> Result<()> {
    if tape.shape(v) != [n] {
        return Err(LossError::Invalid(format!(
            "{op}: expected a length-{n} vector, got shape {:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// Summed [`fl_giou_cls`] over a probability vector.
pub fn tape_fl_giou_cls(
    tape: &mut Tape,
    probs: Var,
    targets: &[ClassTarget],
    opts: &GiouAwareOptions,
) -> Result<Var> {
    if opts.gamma <= 0.0 || !opts.gamma.is_finite() {
        return Err(LossError::Gamma(opts.gamma));
    }
    vector_len(tape, probs, targets.len(), "fl_giou_cls")?;
    let (pos_weight, giou_target): (Vec<f64>, Vec<f64>) = targets
        .iter()
        .map(|&t| {
            let (positive, g) = opts.target_giou(t);
            (if positive { g } else { 0.0 }, g)
        })
        .unzip();
    let neg_mask: Vec<f64> = targets
        .iter()
        .map(|t| f64::from(u8::from(matches!(t, ClassTarget::Negative))))
        .collect();

    let pc = clamp_probs(tape, probs)?;
    let g = tape.constant_vec(giou_target.clone());
    let base = match opts.omega {
        OmegaForm::Agreement => {
            let slope = tape.constant_vec(giou_target.iter().map(|g| 2.0 * g - 1.0).collect());
            let offset = tape.constant_vec(giou_target.iter().map(|g| 1.0 - g).collect());
            let sp = tape.mul(pc, slope)?;
            tape.add(sp, offset)?
        }
        OmegaForm::AbsDifference => {
            let d = tape.sub(pc, g)?;
            tape.abs(d)?
        }
    };
    let base = tape.clamp(base, 0.0, f64::INFINITY)?;
    let omega = tape.powf(base, opts.gamma)?;
    let (log_p, log_q) = log_pair(tape, pc)?;
    let pw = tape.constant_vec(pos_weight);
    let nm = tape.constant_vec(neg_mask);
    let pos = tape.mul(pw, log_p)?;
    let neg = tape.mul(nm, log_q)?;
    let both = tape.add(pos, neg)?;
    let weighted = tape.mul(omega, both)?;
    let s = tape.sum(weighted)?;
    Ok(tape.neg(s)?)
}

/// Summed binary cross-entropy over a probability vector.
pub fn tape_bce(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    vector_len(tape, probs, labels.len(), "bce")?;
    let pc = clamp_probs(tape, probs)?;
    let (log_p, log_q) = log_pair(tape, pc)?;
    let y = tape.constant_vec(labels.iter().map(|&l| f64::from(u8::from(l))).collect());
    let ny = tape.constant_vec(labels.iter().map(|&l| f64::from(u8::from(!l))).collect());
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(ny, log_q)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum(ab)?;
    Ok(tape.neg(s)?)
}

/// Summed sigmoid focal loss with discrete labels (`alpha = 0.25`, `gamma = 2`).
pub fn decoder_cls_loss(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    tape_focal(tape, probs, labels, FOCAL_ALPHA, FOCAL_GAMMA)
}

pub fn tape_focal(
    tape: &mut Tape,
    probs: Var,
    labels: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    vector_len(tape, probs, labels.len(), "focal")?;
    let pc = clamp_probs(tape, probs)?;
    let (log_p, log_q) = log_pair(tape, pc)?;
    let neg = tape.scale(pc, -1.0)?;
    let q = tape.add_scalar(neg, 1.0)?;
    let q_pow = tape.powf(q, gamma)?;
    let p_pow = tape.powf(pc, gamma)?;
    let wpos = tape.constant_vec(
        labels
            .iter()
            .map(|&l| if l { alpha } else { 0.0 })
            .collect(),
    );
    let wneg = tape.constant_vec(
        labels
            .iter()
            .map(|&l| if l { 0.0 } else { 1.0 - alpha })
            .collect(),
    );
    let a = tape.mul(q_pow, log_p)?;
    let a = tape.mul(a, wpos)?;
    let b = tape.mul(p_pow, log_q)?;
    let b = tape.mul(b, wneg)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum(ab)?;
    Ok(tape.neg(s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxWeights {
    fn default() -> Self {
        Self { l1: 5.0, giou: 2.0 }
    }
}

/// Scalar `l1 * L1 + giou * (1 - GIoU)` for one pair.
pub fn box_loss_value(pred: &BBox, target: &BBox, w: BoxWeights) -> Result<f64> {
    Ok(w.l1 * pred.l1(target) + w.giou * (1.0 - giou(pred, target)?))
}

/// Summed box regression loss between the rows of an `[n, 4]` prediction
/// tensor and `n` target boxes.
pub fn box_loss(tape: &mut Tape, pred: Var, targets: &[BBox], w: BoxWeights) -> Result<Var> {
    if tape.shape(pred) != [targets.len(), 4] {
        return Err(LossError::Invalid(format!(
            "box_loss: expected [{}, 4], got {:?}",
            targets.len(),
            tape.shape(pred)
        )));
    }
    for t in targets {
        t.validate()?;
    }
    if targets.is_empty() {
        return Ok(tape.constant(DiffTensor::scalar(0.0)));
    }
    let flat: Vec<f64> = targets.iter().flat_map(BBox::to_array).collect();
    let tgt = tape.constant(DiffTensor::matrix(targets.len(), 4, flat)?);
    let diff = tape.sub(pred, tgt)?;
    let ad = tape.abs(diff)?;
    let l1 = tape.sum(ad)?;
    let l1 = tape.scale(l1, w.l1)?;
    let g = boxgeom::tape_giou(tape, pred, tgt)?;
    let gsum = tape.sum(g)?;
    // sum(1 - giou) = n - sum(giou)
    let gl = tape.scale(gsum, -w.giou)?;
    let gl = tape.add_scalar(gl, w.giou * targets.len() as f64)?;
    Ok(tape.add(l1, gl)?)
}

/// How the encoder head's classification output is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderClsLoss {
    /// GIoU-aware focal loss with GIoU-valued positive targets.
    GiouAware(GiouAwareOptions),
    /// Plain binary cross-entropy with discrete targets.
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossWeights {
    pub cls: f64,
    pub boxes: BoxWeights,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            boxes: BoxWeights::default(),
        }
    }
}

/// Per-term breakdown of a joint loss, as plain values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    pub boxes: f64,
}

/// Combined box + classification loss over one set of predictions, given
/// their assignment to ground truths, normalized by `max(1, |gts|)`.
///
/// `boxes` is `[n, 4]` and `probs` is `[n]`. The GIoU target of a matched
/// prediction is computed from current box values and carries no gradient.
pub fn encoder_joint_loss(
    tape: &mut Tape,
    boxes: Var,
    probs: Var,
    gts: &[BBox],
    assignment: &Assignment,
    cls_loss: EncoderClsLoss,
    weights: JointLossWeights,
) -> Result<(Var, LossTerms)> {
    let targets = matched_gious(tape.value(boxes), gts, assignment)?;
    encoder_joint_loss_with_targets(
        tape, boxes, probs, gts, assignment, &targets, cls_loss, weights,
    )
}

/// GIoU of each assigned `(prediction, gt)` pair, in assignment order.
/// `boxes` holds `[n, 4]` center-form values.
pub fn matched_gious(boxes: &[f64], gts: &[BBox], assignment: &Assignment) -> Result<Vec<f64>> {
    let n = boxes.len() / 4;
    assignment
        .pairs
        .iter()
        .map(|&(p, g)| {
            if p >= n {
                return Err(LossError::IndexOutOfRange { index: p, len: n });
            }
            let gt = gts.get(g).ok_or(LossError::IndexOutOfRange {
                index: g,
                len: gts.len(),
            })?;
            let v = &boxes[p * 4..p * 4 + 4];
            Ok(giou(&BBox::new(v[0], v[1], v[2], v[3])?, gt)?)
        })
        .collect()
}

/// [`encoder_joint_loss`] with the GIoU targets supplied, one per assigned
/// pair.
#[allow(clippy::too_many_arguments)]
pub fn encoder_joint_loss_with_targets(
    tape: &mut Tape,
    boxes: Var,
    probs: Var,
    gts: &[BBox],
    assignment: &Assignment,
    giou_targets: &[f64],
    cls_loss: EncoderClsLoss,
    weights: JointLossWeights,
) -> Result<(Var, LossTerms)> {
    if giou_targets.len() != assignment.pairs.len() {
        return Err(LossError::Invalid(format!(
            "{} GIoU targets for {} pairs",
            giou_targets.len(),
            assignment.pairs.len()
        )));
    }
    let (cls, bl) = matched_terms(
        tape,
        boxes,
        probs,
        gts,
        assignment,
        weights.boxes,
        |tape, probs, matched| match cls_loss {
            EncoderClsLoss::GiouAware(opts) => {
                let mut targets = vec![ClassTarget::Negative; matched.len()];
                for (&(p, _), &g) in assignment.pairs.iter().zip(giou_targets) {
                    targets[p] = ClassTarget::Positive { giou: g };
                }
                tape_fl_giou_cls(tape, probs, &targets, &opts)
            }
            EncoderClsLoss::Bce => {
                let labels: Vec<bool> = matched.iter().map(Option::is_some).collect();
                tape_bce(tape, probs, &labels)
            }
        },
    )?;
    combine(tape, cls, bl, weights.cls, gts.len())
}

/// Decoder-stage loss: discrete-label focal classification on every
/// prediction plus box regression on matched ones, normalized by
/// `max(1, |gts|)`.
pub fn decoder_stage_loss(
    tape: &mut Tape,
    boxes: Var,
    probs: Var,
    gts: &[BBox],
    assignment: &Assignment,
    weights: JointLossWeights,
) -> Result<(Var, LossTerms)> {
    let (cls, bl) = matched_terms(
        tape,
        boxes,
        probs,
        gts,
        assignment,
        weights.boxes,
        |tape, probs, matched| {
            let labels: Vec<bool> = matched.iter().map(Option::is_some).collect();
            decoder_cls_loss(tape, probs, &labels)
        },
    )?;
    combine(tape, cls, bl, weights.cls, gts.len())
}

type Matched = Vec<Option<usize>>;

fn matched_terms(
    tape: &mut Tape,
    boxes: Var,
    probs: Var,
    gts: &[BBox],
    assignment: &Assignment,
    box_weights: BoxWeights,
    cls: impl FnOnce(&mut Tape, Var, &Matched) -> Result<Var>,
) -> Result<(Var, Var)> {
    let n = match tape.shape(probs) {
        [n] => *n,
        s => {
            return Err(LossError::Invalid(format!(
                "probs must be a vector, got {s:?}"
            )))
        }
    };
    if tape.shape(boxes) != [n, 4] {
        return Err(LossError::Invalid(format!(
            "boxes must be [{n}, 4], got {:?}",
            tape.shape(boxes)
        )));
    }
    let mut matched: Matched = vec![None; n];
    let mut rows = Vec::with_capacity(assignment.pairs.len());
    let mut targets = Vec::with_capacity(assignment.pairs.len());
    for &(p, g) in &assignment.pairs {
        if p >= n {
            return Err(LossError::IndexOutOfRange { index: p, len: n });
        }
        let gt = *gts.get(g).ok_or(LossError::IndexOutOfRange {
            index: g,
            len: gts.len(),
        })?;
        matched[p] = Some(g);
        rows.push(p);
        targets.push(gt);
    }
    let cls_sum = cls(tape, probs, &matched)?;
    let picked = tape.gather_rows(boxes, &rows)?;
    let box_sum = box_loss(tape, picked, &targets, box_weights)?;
    Ok((cls_sum, box_sum))
}

fn combine(
    tape: &mut Tape,
    cls: Var,
    boxes: Var,
    cls_weight: f64,
    n_gts: usize,
) -> Result<(Var, LossTerms)> {
    let norm = n_gts.max(1) as f64;
    let terms = LossTerms {
        cls: cls_weight * tape.item(cls) / norm,
        boxes: tape.item(boxes) / norm,
    };
    let c = tape.scale(cls, cls_weight)?;
    let total = tape.add(c, boxes)?;
    Ok((tape.scale(total, 1.0 / norm)?, terms))
}

/// One step of the two-query descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumStep {
    pub step: usize,
    pub p1: f64,
    pub p2: f64,
    /// Gradient of the pair loss with respect to each query's own logit,
    /// before any parameter sharing: `p1 - 1` and `p2`.
    pub contrib1: f64,
    pub contrib2: f64,
    /// Gradient actually applied to the parameter behind each query.
    pub grad1: f64,
    pub grad2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumTrace {
    pub differentiated: bool,
    pub steps: Vec<EquilibriumStep>,
    pub final_p: (f64, f64),
}

/// Gradient descent on the logits of two queries, query 1 matched and
/// query 2 unmatched, under the pair loss.
///
/// With `differentiated = false` both queries read the same logit, so their
/// opposite-sign contributions are summed into one update. With
/// `differentiated = true` each query owns its logit.
pub fn equilibrium_sim(
    init_p: f64,
    differentiated: bool,
    lr: f64,
    steps: usize,
) -> Result<EquilibriumTrace> {
    if !(init_p > 0.0 && init_p < 1.0) {
        return Err(LossError::Probability(init_p));
    }
    if lr <= 0.0 || !lr.is_finite() || steps == 0 {
        return Err(LossError::Invalid(format!("lr {lr}, steps {steps}")));
    }
    let z0 = (init_p / (1.0 - init_p)).ln();
    let (mut z1, mut z2) = (z0, z0);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (p1, p2) = (sigmoid(z1), sigmoid(z2));
        let contrib1 = p1 - 1.0;
        let contrib2 = p2;
        let (grad1, grad2) = if differentiated {
            (contrib1, contrib2)
        } else {
            let shared = contrib1 + contrib2;
            (shared, shared)
        };
        z1 -= lr * grad1;
        z2 -= lr * grad2;
        if !(z1.is_finite() && z2.is_finite()) {
            return Err(LossError::Diverged(step));
        }
        trace.push(EquilibriumStep {
            step,
            p1,
            p2,
            contrib1,
            contrib2,
            grad1,
            grad2,
        });
    }
    Ok(EquilibriumTrace {
        differentiated,
        steps: trace,
        final_p: (sigmoid(z1), sigmoid(z2)),
    })
}
