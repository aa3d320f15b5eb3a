//! Toy two-stage query detector over scene feature grids.
//!
//! Encoder: per-cell embedding MLP, dense self-attention blocks, and a
//! per-cell score/box head. Top-K cells by score become decoder queries.
//! Decoder layers cross-attend to the encoder memory (optionally preceded by
//! query self-attention), each with its own classification and box-refinement
//! head. The DCG block sits between the first `dec_before` layers and the
//! remaining `dec_after` layers.

mod train;

pub use train::{train, AdamW, TrainConfig, TrainLogRow};

use crate::assign::{hungarian, match_cost, AssignError, Assignment, ClassCost, CostWeights};
use crate::boxgeom::{BBox, GeomError};
use crate::dcg::{self, DcgError, DcgInit, DcgParams, DcgSettings, GateDirection, Query};
use crate::eval::EvalError;
use crate::loss::{
    decoder_stage_loss, encoder_joint_loss_with_targets, matched_gious, BoxWeights, EncoderClsLoss,
    GiouAwareOptions, JointLossWeights, LossError, OmegaForm,
};
use crate::nn::{AffineNorm, Attention, Init, Linear, Mlp2};
use crate::scenes::{Scene, CHANNELS};
use crate::suppress::Detection;
use crate::tensor::{
    inverse_sigmoid, relative_error, DiffTensor, ParamId, ParamStore, Tape, TensorError,
    TensorRecord, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Frequencies (in multiples of pi) of the sinusoidal position features.
pub const POS_FREQS: [f64; 3] = [1.0, 2.0, 4.0];
/// `(x, y)` plus a sine and cosine per frequency and axis.
pub const POS_DIM: usize = 2 + 4 * POS_FREQS.len();
/// Predicted box coordinates are clamped to `[BOX_EPS, 1 - BOX_EPS]`.
pub const BOX_EPS: f64 = 1e-4;
pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
/// Initial probability encoded in the classification head biases.
pub const PRIOR_PROB: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scene {image_id}: {msg}")]
    Scene { image_id: String, msg: String },
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: Box<DetectorError>,
    },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Dcg(#[from] DcgError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub dec_before: usize,
    pub dec_after: usize,
    pub queries: usize,
    /// Predict encoder boxes as offsets from per-cell anchors; without
    /// anchors a zero head outputs the box `(0.5, 0.5, 0.5, 0.5)`.
    pub cell_anchors: bool,
    /// Drop query self-attention from decoder layers.
    pub aligned: bool,
    pub dcg: bool,
    /// Supervise the encoder score with the GIoU-aware loss instead of BCE.
    pub gqs: bool,
    pub gamma: f64,
    pub omega: OmegaForm,
    pub clamp_giou: bool,
    pub c_low: f64,
    pub gate_threshold: f64,
    pub gate_direction: GateDirection,
    /// Start the DCG composition FFN with a zero output layer.
    pub dcg_zero_init: bool,
    pub cost_cls: f64,
    pub cost_l1: f64,
    pub cost_giou: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            hidden: 32,
            encoder_layers: 2,
            dec_before: 1,
            dec_after: 2,
            queries: 32,
            cell_anchors: true,
            aligned: true,
            dcg: true,
            gqs: true,
            gamma: 2.0,
            omega: OmegaForm::Agreement,
            clamp_giou: true,
            c_low: 0.1,
            gate_threshold: 0.5,
            gate_direction: GateDirection::Below,
            dcg_zero_init: true,
            cost_cls: 2.0,
            cost_l1: 5.0,
            cost_giou: 2.0,
            loss_cls: 2.0,
            loss_l1: 5.0,
            loss_giou: 2.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if self.grid == 0 || self.hidden == 0 || self.encoder_layers == 0 || self.queries == 0 {
            return bad("grid, hidden, encoder_layers and queries must be >= 1".into());
        }
        if self.dec_after == 0 {
            return bad("dec_after must be >= 1".into());
        }
        if self.queries > self.grid * self.grid {
            return bad(format!(
                "queries {} exceeds {} cells",
                self.queries,
                self.grid * self.grid
            ));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma {} must be > 0", self.gamma));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("lr, weight_decay and grad_clip must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)".into());
        }
        self.dcg_settings().validate()?;
        Ok(())
    }

    pub fn dcg_settings(&self) -> DcgSettings {
        DcgSettings {
            c_low: self.c_low,
            gate_threshold: self.gate_threshold,
            gate_direction: self.gate_direction,
        }
    }

    pub fn decoder_layers(&self) -> usize {
        self.dec_before + self.dec_after
    }

    /// Encoder stage plus one stage per decoder layer.
    pub fn stage_count(&self) -> usize {
        1 + self.decoder_layers()
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            cls: self.cost_cls,
            l1: self.cost_l1,
            giou: self.cost_giou,
        }
    }

    pub fn loss_weights(&self) -> JointLossWeights {
        JointLossWeights {
            cls: self.loss_cls,
            boxes: BoxWeights {
                l1: self.loss_l1,
                giou: self.loss_giou,
            },
        }
    }

    pub fn encoder_cls_loss(&self) -> EncoderClsLoss {
        if self.gqs {
            EncoderClsLoss::GiouAware(GiouAwareOptions {
                gamma: self.gamma,
                clamp_giou: self.clamp_giou,
                omega: self.omega,
            })
        } else {
            EncoderClsLoss::Bce
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderBlock {
    attn: Attention,
    norm1: AffineNorm,
    ffn: Mlp2,
    norm2: AffineNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    self_attn: Option<(Attention, AffineNorm)>,
    cross: Attention,
    norm1: AffineNorm,
    ffn: Mlp2,
    norm2: AffineNorm,
    cls: Linear,
    box_head: Mlp2,
}

impl DecoderLayer {
    fn body_count(&self) -> usize {
        let sa = self
            .self_attn
            .as_ref()
            .map_or(0, |(a, n)| a.param_count() + n.param_count());
        sa + self.cross.param_count()
            + self.norm1.param_count()
            + self.ffn.param_count()
            + self.norm2.param_count()
    }

    fn head_count(&self) -> usize {
        self.cls.param_count() + self.box_head.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: Mlp2,
    encoder: Vec<EncoderBlock>,
    enc_score: Linear,
    enc_box: Mlp2,
    query_proj: Linear,
    query_pos: Linear,
    memory_pos: Linear,
    decoder: Vec<DecoderLayer>,
    dcg: Option<DcgParams>,
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden;
        let x = Init::Xavier;
        let embed = Mlp2::new(store, "embed", CHANNELS + POS_DIM, d, d, x, x, &mut rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| EncoderBlock {
                attn: Attention::new(store, &format!("enc{l}.attn"), d, &mut rng),
                norm1: AffineNorm::new(store, &format!("enc{l}.norm1"), d),
                ffn: Mlp2::new(store, &format!("enc{l}.ffn"), d, 2 * d, d, x, x, &mut rng),
                norm2: AffineNorm::new(store, &format!("enc{l}.norm2"), d),
            })
            .collect();
        let enc_score = Linear::new(store, "enc_head.score", d, 1, x, &mut rng);
        set_prior_bias(store, &enc_score);
        let enc_box = Mlp2::new(store, "enc_head.box", d, d, 4, x, Init::Zero, &mut rng);
        let query_proj = Linear::new(store, "query_proj", d, d, x, &mut rng);
        let query_pos = Linear::new(store, "query_pos", POS_DIM + 2, d, x, &mut rng);
        let memory_pos = Linear::new(store, "memory_pos", POS_DIM, d, x, &mut rng);
        let decoder: Vec<DecoderLayer> = (0..cfg.decoder_layers())
            .map(|l| DecoderLayer {
                self_attn: (!cfg.aligned).then(|| {
                    (
                        Attention::new(store, &format!("dec{l}.self_attn"), d, &mut rng),
                        AffineNorm::new(store, &format!("dec{l}.norm_sa"), d),
                    )
                }),
                cross: Attention::new(store, &format!("dec{l}.cross"), d, &mut rng),
                norm1: AffineNorm::new(store, &format!("dec{l}.norm1"), d),
                ffn: Mlp2::new(store, &format!("dec{l}.ffn"), d, 2 * d, d, x, x, &mut rng),
                norm2: AffineNorm::new(store, &format!("dec{l}.norm2"), d),
                cls: Linear::new(store, &format!("dec{l}.head.cls"), d, 1, x, &mut rng),
                box_head: Mlp2::new(
                    store,
                    &format!("dec{l}.head.box"),
                    d,
                    d,
                    4,
                    x,
                    Init::Zero,
                    &mut rng,
                ),
            })
            .collect();
        for layer in &decoder {
            set_prior_bias(store, &layer.cls);
        }
        // created last so that enabling DCG leaves every other initial weight unchanged
        let dcg = cfg.dcg.then(|| {
            let init = DcgInit {
                id_encoder: Init::Xavier,
                ffn_out: if cfg.dcg_zero_init {
                    Init::Zero
                } else {
                    Init::Xavier
                },
            };
            DcgParams::new(store, "dcg", d, cfg.dcg_settings(), init, &mut rng)
        });
        Self {
            embed,
            encoder,
            enc_score,
            enc_box,
            query_proj,
            query_pos,
            memory_pos,
            decoder,
            dcg,
        }
    }
}

fn set_prior_bias(store: &mut ParamStore, head: &Linear) {
    let b = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
    store.get_mut(head.b).values_mut().fill(b);
}

/// Sinusoidal position features of a point in `[0, 1]^2`.
pub fn position_features(x: f64, y: f64) -> [f64; POS_DIM] {
    let mut out = [0.0; POS_DIM];
    out[0] = x;
    out[1] = y;
    for (k, f) in POS_FREQS.iter().enumerate() {
        let (ax, ay) = (std::f64::consts::PI * f * x, std::f64::consts::PI * f * y);
        out[2 + 4 * k] = ax.sin();
        out[3 + 4 * k] = ax.cos();
        out[4 + 4 * k] = ay.sin();
        out[5 + 4 * k] = ay.cos();
    }
    out
}

/// Center of cell `idx` on a `grid x grid` lattice, row-major.
pub fn cell_center(idx: usize, grid: usize) -> (f64, f64) {
    let (r, c) = (idx / grid, idx % grid);
    (
        (c as f64 + 0.5) / grid as f64,
        (r as f64 + 0.5) / grid as f64,
    )
}

/// Outcome of [`Model::gradient_check`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightGradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor, index, analytic, numeric)` at the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Per-stage plain-value outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Query (or cell) content vectors after this stage.
    pub contents: Vec<Vec<f64>>,
}

/// Queries entering and leaving the DCG block.
#[derive(Debug, Clone, PartialEq)]
pub struct DcgTrace {
    pub before: Vec<Query>,
    pub after: Vec<Query>,
    pub neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    /// Encoder stage first, then one entry per decoder layer.
    pub stages: Vec<StageOutput>,
    /// Cells chosen as queries, in score order.
    pub selected: Vec<usize>,
    pub dcg: Option<DcgTrace>,
}

impl StageOutputs {
    pub fn final_stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn detections(&self, image_id: &str, stage: usize) -> Vec<Detection> {
        let s = &self.stages[stage];
        s.boxes
            .iter()
            .zip(&s.scores)
            .map(|(b, &score)| Detection {
                image_id: image_id.to_string(),
                bbox: *b,
                score,
                stage: Some(stage),
            })
            .collect()
    }
}

struct StageVars {
    probs: Var,
    boxes: Var,
    content: Var,
}

struct DcgVars {
    before: Var,
    after: Var,
    confs: Vec<f64>,
    boxes: Vec<BBox>,
    neighbors: Vec<Vec<usize>>,
}

struct Graph {
    stages: Vec<StageVars>,
    selected: Vec<usize>,
    dcg: Option<DcgVars>,
    frozen: Frozen,
}

/// Values the backward pass treats as constants: query selection,
/// reference boxes entering each decoder layer, DCG gate confidences,
/// per-stage assignments and encoder GIoU targets.
///
/// Replaying a recorded `Frozen` while perturbing weights gives the function
/// whose gradient backprop computes, which is what finite-difference checks
/// need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frozen {
    pub selected: Vec<usize>,
    pub refs: Vec<Vec<BBox>>,
    pub dcg_confs: Vec<f64>,
    pub assignments: Vec<Assignment>,
    pub giou_targets: Vec<f64>,
}

/// Loss terms of one scene, as plain values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub enc_cls: f64,
    pub enc_box: f64,
    pub dec_cls: f64,
    pub dec_box: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.enc_cls += o.enc_cls;
        self.enc_box += o.enc_box;
        self.dec_cls += o.dec_cls;
        self.dec_box += o.dec_box;
    }
}

impl LossBreakdown {
    pub fn scaled(self, s: f64) -> Self {
        Self {
            total: self.total * s,
            enc_cls: self.enc_cls * s,
            enc_box: self.enc_box * s,
            dec_cls: self.dec_cls * s,
            dec_box: self.dec_box * s,
        }
    }
}

/// Exact parameter counts per named block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn block(&self, name: &str) -> Option<usize> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

/// Weights of one query self-attention block: four `d x d` projections with
/// biases plus its affine layer norm.
pub fn self_attention_block_size(d: usize) -> usize {
    4 * (d * d + d) + 2 * d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

fn boxes_of(values: &[f64]) -> Result<Vec<BBox>> {
    values
        .chunks(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]).map_err(Into::into))
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::build(&config, &mut store);
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dcg_params(&self) -> Option<&DcgParams> {
        self.layout.dcg.as_ref()
    }

    /// Sets the encoder head's output layers to zero.
    pub fn zero_encoder_heads(&mut self) {
        for id in [
            self.layout.enc_score.w,
            self.layout.enc_score.b,
            self.layout.enc_box.l2.w,
            self.layout.enc_box.l2.b,
        ] {
            self.store.get_mut(id).values_mut().fill(0.0);
        }
    }

    fn input_matrix(&self, scene: &Scene) -> Result<DiffTensor> {
        let g = self.config.grid;
        let cells = g * g;
        if scene.grid != g || scene.features.len() != cells * CHANNELS {
            return Err(DetectorError::Scene {
                image_id: scene.image_id.clone(),
                msg: format!(
                    "expected a {g}x{g}x{CHANNELS} grid, got grid {} with {} values",
                    scene.grid,
                    scene.features.len()
                ),
            });
        }
        let width = CHANNELS + POS_DIM;
        let mut values = Vec::with_capacity(cells * width);
        for (idx, f) in scene.features.chunks(CHANNELS).enumerate() {
            values.extend_from_slice(f);
            let (x, y) = cell_center(idx, g);
            values.extend_from_slice(&position_features(x, y));
        }
        Ok(DiffTensor::matrix(cells, width, values)?)
    }

    /// Inverse-sigmoid anchor box of every cell: the cell itself.
    fn anchor_logits(&self) -> DiffTensor {
        let g = self.config.grid;
        let side = inverse_sigmoid(1.0 / g as f64, BOX_EPS);
        let values = (0..g * g)
            .flat_map(|i| {
                let (cx, cy) = cell_center(i, g);
                [
                    inverse_sigmoid(cx, BOX_EPS),
                    inverse_sigmoid(cy, BOX_EPS),
                    side,
                    side,
                ]
            })
            .collect();
        DiffTensor::matrix(g * g, 4, values).expect("shape matches")
    }

    fn box_pos_input(refs: &[BBox]) -> DiffTensor {
        let mut values = Vec::with_capacity(refs.len() * (POS_DIM + 2));
        for b in refs {
            values.extend_from_slice(&position_features(b.cx, b.cy));
            values.push(b.w);
            values.push(b.h);
        }
        DiffTensor::matrix(refs.len(), POS_DIM + 2, values).expect("shape matches")
    }

    fn decoder_layer(
        &self,
        tape: &mut Tape,
        p: &[Var],
        layer: &DecoderLayer,
        q: Var,
        refs: &[BBox],
        memory: Var,
        memory_keys: Var,
    ) -> Result<(Var, Var, Var)> {
        let lay = &self.layout;
        let pos_in = tape.constant(Self::box_pos_input(refs));
        let qpos = lay.query_pos.forward(tape, p, pos_in)?;
        let mut q = q;
        if let Some((sa, norm)) = &layer.self_attn {
            let qk = tape.add(q, qpos)?;
            let a = sa.forward(tape, p, qk, qk, q)?;
            let r = tape.add(q, a)?;
            q = norm.forward(tape, p, r)?;
        }
        let qc = tape.add(q, qpos)?;
        let a = layer.cross.forward(tape, p, qc, memory_keys, memory)?;
        let r = tape.add(q, a)?;
        q = layer.norm1.forward(tape, p, r)?;
        let f = layer.ffn.forward(tape, p, q)?;
        let r = tape.add(q, f)?;
        q = layer.norm2.forward(tape, p, r)?;

        let logit = layer.cls.forward(tape, p, q)?;
        let prob = tape.sigmoid(logit)?;
        let prob = tape.reshape(prob, vec![refs.len()])?;
        let delta = layer.box_head.forward(tape, p, q)?;
        let base: Vec<f64> = refs
            .iter()
            .flat_map(|b| b.to_array().map(|v| inverse_sigmoid(v, BOX_EPS)))
            .collect();
        let base = tape.constant(DiffTensor::matrix(refs.len(), 4, base)?);
        let z = tape.add(base, delta)?;
        let bx = tape.sigmoid(z)?;
        let bx = tape.clamp(bx, BOX_EPS, 1.0 - BOX_EPS)?;
        Ok((q, prob, bx))
    }

    /// Builds the full computation on `tape` for the first `n_after`
    /// post-DCG layers.
    fn build(
        &self,
        tape: &mut Tape,
        p: &[Var],
        scene: &Scene,
        n_after: usize,
        frozen: Option<&Frozen>,
    ) -> Result<Graph> {
        let cfg = &self.config;
        let lay = &self.layout;
        let cells = cfg.grid * cfg.grid;

        let x = tape.constant(self.input_matrix(scene)?);
        let mut h = lay.embed.forward(tape, p, x)?;
        for blk in &lay.encoder {
            let a = blk.attn.forward(tape, p, h, h, h)?;
            let r = tape.add(h, a)?;
            h = blk.norm1.forward(tape, p, r)?;
            let f = blk.ffn.forward(tape, p, h)?;
            let r = tape.add(h, f)?;
            h = blk.norm2.forward(tape, p, r)?;
        }
        let s = lay.enc_score.forward(tape, p, h)?;
        let s = tape.sigmoid(s)?;
        let enc_probs = tape.reshape(s, vec![cells])?;
        let mut b = lay.enc_box.forward(tape, p, h)?;
        if cfg.cell_anchors {
            let anchors = tape.constant(self.anchor_logits());
            b = tape.add(b, anchors)?;
        }
        let b = tape.sigmoid(b)?;
        let enc_boxes = tape.clamp(b, BOX_EPS, 1.0 - BOX_EPS)?;
        let mut stages = vec![StageVars {
            probs: enc_probs,
            boxes: enc_boxes,
            content: h,
        }];

        // query selection: top-K by score, ties to the lowest cell index
        let scores = tape.value(enc_probs).to_vec();
        let mut order: Vec<usize> = (0..cells).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let selected: Vec<usize> = match frozen {
            Some(f) => f.selected.clone(),
            None => order[..cfg.queries].to_vec(),
        };
        let all_boxes = boxes_of(tape.value(enc_boxes))?;
        let mut refs: Vec<BBox> = match frozen {
            Some(f) => f.refs[0].clone(),
            None => selected.iter().map(|&i| all_boxes[i]).collect(),
        };
        let mut confs: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
        let mut used = Frozen {
            selected: selected.clone(),
            ..Frozen::default()
        };
        let picked = tape.gather_rows(h, &selected)?;
        let mut q = lay.query_proj.forward(tape, p, picked)?;

        let pe: Vec<f64> = (0..cells)
            .flat_map(|i| {
                let (cx, cy) = cell_center(i, cfg.grid);
                position_features(cx, cy)
            })
            .collect();
        let pe = tape.constant(DiffTensor::matrix(cells, POS_DIM, pe)?);
        let mpos = lay.memory_pos.forward(tape, p, pe)?;
        let memory_keys = tape.add(h, mpos)?;

        let n_layers = cfg.dec_before + n_after;
        let mut dcg_vars = None;
        for (l, layer) in lay.decoder.iter().enumerate().take(n_layers) {
            used.refs.push(refs.clone());
            if l == cfg.dec_before {
                if let Some(dp) = &lay.dcg {
                    if let Some(f) = frozen {
                        confs = f.dcg_confs.clone();
                    }
                    used.dcg_confs = confs.clone();
                    let (out, neighbors) = dcg::dcg_forward(tape, p, dp, q, &confs, &refs)?;
                    dcg_vars = Some(DcgVars {
                        before: q,
                        after: out.composed,
                        confs: confs.clone(),
                        boxes: refs.clone(),
                        neighbors,
                    });
                    q = out.composed;
                }
            }
            let (nq, prob, bx) = self.decoder_layer(tape, p, layer, q, &refs, h, memory_keys)?;
            q = nq;
            confs = tape.value(prob).to_vec();
            refs = match frozen.and_then(|f| f.refs.get(l + 1)) {
                Some(r) => r.clone(),
                None => boxes_of(tape.value(bx))?,
            };
            stages.push(StageVars {
                probs: prob,
                boxes: bx,
                content: q,
            });
        }
        Ok(Graph {
            stages,
            selected,
            dcg: dcg_vars,
            frozen: used,
        })
    }

    fn queries_of(
        tape: &Tape,
        content: Var,
        confs: &[f64],
        boxes: &[BBox],
        stage: usize,
    ) -> Vec<Query> {
        let d = tape.shape(content)[1];
        tape.value(content)
            .chunks(d)
            .zip(confs.iter().zip(boxes))
            .map(|(c, (&confidence, &ref_box))| Query {
                content: c.to_vec(),
                ref_box,
                confidence,
                stage,
            })
            .collect()
    }

    /// Runs inference and records every stage.
    pub fn forward(&self, scene: &Scene) -> Result<StageOutputs> {
        let mut tape = Tape::new();
        let p = self.store.load(&mut tape, false);
        let g = self.build(&mut tape, &p, scene, self.config.dec_after, None)?;
        let mut stages = Vec::with_capacity(g.stages.len());
        for (k, s) in g.stages.iter().enumerate() {
            let d = tape.shape(s.content)[1];
            stages.push(StageOutput {
                stage: k,
                boxes: boxes_of(tape.value(s.boxes))?,
                scores: tape.value(s.probs).to_vec(),
                contents: tape
                    .value(s.content)
                    .chunks(d)
                    .map(<[f64]>::to_vec)
                    .collect(),
            });
        }
        let dcg = g.dcg.map(|dv| {
            let stage = self.config.dec_before;
            DcgTrace {
                before: Self::queries_of(&tape, dv.before, &dv.confs, &dv.boxes, stage),
                after: Self::queries_of(&tape, dv.after, &dv.confs, &dv.boxes, stage),
                neighbors: dv.neighbors,
            }
        });
        Ok(StageOutputs {
            stages,
            selected: g.selected,
            dcg,
        })
    }

    /// Detections of `stage` (final stage when `None`).
    pub fn detect(&self, scene: &Scene, stage: Option<usize>) -> Result<Vec<Detection>> {
        let out = self.forward(scene)?;
        let s = stage.unwrap_or(out.final_stage());
        if s >= out.stages.len() {
            return Err(DetectorError::Config(format!(
                "stage {s} out of range for {} stages",
                out.stages.len()
            )));
        }
        Ok(out.detections(&scene.image_id, s))
    }

    fn scene_loss(
        &self,
        tape: &mut Tape,
        p: &[Var],
        scene: &Scene,
        frozen: Option<&Frozen>,
    ) -> Result<(Var, LossBreakdown, Frozen)> {
        let g = self.build(tape, p, scene, self.config.dec_after, frozen)?;
        let mut used = g.frozen;
        let gts = &scene.gt_boxes;
        let weights = self.config.loss_weights();
        let mut bd = LossBreakdown::default();
        let mut total: Option<Var> = None;
        for (k, s) in g.stages.iter().enumerate() {
            let a = match frozen {
                Some(f) => f.assignments[k].clone(),
                None => {
                    let boxes = boxes_of(tape.value(s.boxes))?;
                    let preds: Vec<(BBox, f64)> = boxes
                        .into_iter()
                        .zip(tape.value(s.probs).iter().copied())
                        .collect();
                    hungarian(&match_cost(
                        &preds,
                        gts,
                        self.config.cost_weights(),
                        ClassCost::Linear,
                    )?)
                }
            };
            let l = if k == 0 {
                let targets = match frozen {
                    Some(f) => f.giou_targets.clone(),
                    None => matched_gious(tape.value(s.boxes), gts, &a)?,
                };
                let cls = self.config.encoder_cls_loss();
                let (l, terms) = encoder_joint_loss_with_targets(
                    tape, s.boxes, s.probs, gts, &a, &targets, cls, weights,
                )?;
                bd.enc_cls += terms.cls;
                bd.enc_box += terms.boxes;
                used.giou_targets = targets;
                l
            } else {
                let (l, terms) = decoder_stage_loss(tape, s.boxes, s.probs, gts, &a, weights)?;
                bd.dec_cls += terms.cls;
                bd.dec_box += terms.boxes;
                l
            };
            used.assignments.push(a);
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let total = total.expect("at least the encoder stage");
        bd.total = tape.item(total);
        Ok((total, bd, used))
    }

    /// Training loss of one scene.
    pub fn loss(&self, scene: &Scene) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.store.load(&mut tape, false);
        Ok(self.scene_loss(&mut tape, &p, scene, None)?.1)
    }

    /// Training loss with every detached quantity fixed to `frozen`.
    pub fn loss_frozen(&self, scene: &Scene, frozen: &Frozen) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.store.load(&mut tape, false);
        Ok(self.scene_loss(&mut tape, &p, scene, Some(frozen))?.1)
    }

    /// Training loss of one scene and its gradient for every stored tensor.
    pub fn loss_and_grads(&self, scene: &Scene) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let (bd, g, _) = self.loss_grads_frozen(scene)?;
        Ok((bd, g))
    }

    /// As [`Model::loss_and_grads`], also returning the detached values used.
    pub fn loss_grads_frozen(
        &self,
        scene: &Scene,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>, Frozen)> {
        let mut tape = Tape::new();
        let p = self.store.load(&mut tape, true);
        let (root, bd, frozen) = self.scene_loss(&mut tape, &p, scene, None)?;
        tape.backward(root)?;
        Ok((bd, self.store.gradients(&tape, &p), frozen))
    }

    /// Compares the analytic gradient of the training loss on `scene` with
    /// central differences at `samples` weights drawn from `seed`. The
    /// matching and every other detached quantity are held at their values
    /// for the unperturbed weights.
    pub fn gradient_check(
        &mut self,
        scene: &Scene,
        samples: usize,
        eps: f64,
        seed: u64,
    ) -> Result<WeightGradCheck> {
        use rand::Rng;
        let (_, grads, frozen) = self.loss_grads_frozen(scene)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = WeightGradCheck::default();
        for _ in 0..samples {
            let t = rng.random_range(0..grads.len());
            let k = rng.random_range(0..grads[t].len());
            let id = ParamId(t);
            let orig = self.store.get(id).values()[k];
            self.store.get_mut(id).values_mut()[k] = orig + eps;
            let up = self.loss_frozen(scene, &frozen);
            self.store.get_mut(id).values_mut()[k] = orig - eps;
            let down = self.loss_frozen(scene, &frozen);
            self.store.get_mut(id).values_mut()[k] = orig;
            let numeric = (up?.total - down?.total) / (2.0 * eps);
            let err = relative_error(grads[t][k], numeric);
            worst.checked += 1;
            if err >= worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst = Some((self.store.name(id).to_string(), k, grads[t][k], numeric));
            }
        }
        Ok(worst)
    }

    pub fn param_count(&self) -> ParamCount {
        let lay = &self.layout;
        let encoder: usize = lay
            .encoder
            .iter()
            .map(|b| {
                b.attn.param_count()
                    + b.norm1.param_count()
                    + b.ffn.param_count()
                    + b.norm2.param_count()
            })
            .sum();
        let blocks = vec![
            ("embed".to_string(), lay.embed.param_count()),
            ("encoder".to_string(), encoder),
            (
                "encoder_head".to_string(),
                lay.enc_score.param_count() + lay.enc_box.param_count(),
            ),
            ("query_proj".to_string(), lay.query_proj.param_count()),
            (
                "positional".to_string(),
                lay.query_pos.param_count() + lay.memory_pos.param_count(),
            ),
            (
                "decoder".to_string(),
                lay.decoder.iter().map(DecoderLayer::body_count).sum(),
            ),
            (
                "stage_heads".to_string(),
                lay.decoder.iter().map(DecoderLayer::head_count).sum(),
            ),
            (
                "dcg".to_string(),
                lay.dcg.as_ref().map_or(0, DcgParams::param_count),
            ),
        ];
        let total = blocks.iter().map(|b| b.1).sum();
        debug_assert_eq!(total, self.store.numel());
        ParamCount { blocks, total }
    }

    /// Inference model using only the first `keep` post-DCG layers.
    pub fn truncate_decoder(&self, keep: usize) -> Result<Model> {
        if keep == 0 || keep > self.config.dec_after {
            return Err(DetectorError::Config(format!(
                "keep {keep} outside 1..={}",
                self.config.dec_after
            )));
        }
        let cfg = ModelConfig {
            dec_after: keep,
            ..self.config.clone()
        };
        let mut out = Model::new(cfg)?;
        for (id, name, _) in out.store.clone().iter() {
            let src = self.store.find(name).expect("truncated layout is a subset");
            *out.store.get_mut(id) = self.store.get(src).clone();
        }
        Ok(out)
    }

    pub fn to_snapshot(&self) -> Snapshot {
        Snapshot {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            config: self.config.clone(),
            tensors: self.store.to_records(),
        }
    }

    pub fn from_snapshot(snap: Snapshot) -> Result<Self> {
        if snap.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(DetectorError::Snapshot(format!(
                "unsupported schema_version {}",
                snap.schema_version
            )));
        }
        let mut model = Model::new(snap.config)?;
        let loaded = ParamStore::from_records(snap.tensors)?;
        if loaded.len() != model.store.len() {
            return Err(DetectorError::Snapshot(format!(
                "{} tensors, layout expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for (id, name, t) in loaded.iter() {
            let dst = model
                .store
                .find(name)
                .ok_or_else(|| DetectorError::Snapshot(format!("unexpected tensor {name}")))?;
            if model.store.get(dst).shape() != t.shape() {
                return Err(DetectorError::Snapshot(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.get(dst).shape()
                )));
            }
            let _ = id;
            *model.store.get_mut(dst) = t.clone();
        }
        Ok(model)
    }
}
