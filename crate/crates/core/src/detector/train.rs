//! AdamW and the minibatch training loop.

use super::{DetectorError, LossBreakdown, Model, ModelConfig, Result};
use crate::eval::{stage_metrics, DEFAULT_IOU_THRESH};
use crate::scenes::Scene;
use crate::tensor::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Validate every this many epochs (and after the last); 0 never.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub enc_cls: f64,
    pub enc_box: f64,
    pub dec_cls: f64,
    pub dec_box: f64,
    pub ap: Option<f64>,
    pub mr2: Option<f64>,
    pub ji: Option<f64>,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], cfg: &ModelConfig) {
        self.t += 1;
        let clip = if cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id).values_mut();
            for (j, wj) in w.iter_mut().enumerate() {
                let g = grads[k][j] * clip;
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS) + cfg.weight_decay * *wj;
                *wj -= cfg.lr * update;
            }
        }
    }
}

fn validate(model: &Model, val: &[Scene]) -> Result<(f64, Option<f64>, f64)> {
    let dets = val
        .par_iter()
        .map(|s| model.detect(s, None))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = val.iter().map(|s| s.gt_boxes.clone()).collect();
    let m = stage_metrics(0, &dets, &gts, DEFAULT_IOU_THRESH)?;
    Ok((m.ap, m.mr2, m.ji))
}

/// Trains `model` in place on `train_set`, logging one row per epoch.
///
/// Per-scene gradients are computed in parallel and summed in batch order,
/// so results do not depend on the thread count.
pub fn train(
    model: &mut Model,
    train_set: &[Scene],
    val: &[Scene],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>> {
    if train_set.is_empty() {
        return Err(DetectorError::Config("empty training set".into()));
    }
    if tc.batch_size == 0 {
        return Err(DetectorError::Config("batch_size must be >= 1".into()));
    }
    let mut opt = AdamW::new(model.store());
    let mut rng = ChaCha8Rng::seed_from_u64(model.config().seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            let results = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train_set[i]))
                .collect::<Vec<_>>();
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (bd, g) = r.map_err(|e| DetectorError::Diverged {
                    epoch,
                    step,
                    source: Box::new(e),
                })?;
                if !bd.total.is_finite() {
                    return Err(DetectorError::Diverged {
                        epoch,
                        step,
                        source: Box::new(DetectorError::Config("non-finite loss".into())),
                    });
                }
                sum += bd;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let cfg = model.config().clone();
            opt.step(model.store_mut(), &grads, &cfg);
        }
        let mean = sum.scaled(1.0 / train_set.len() as f64);
        let do_eval = tc.eval_every > 0
            && !val.is_empty()
            && (epoch % tc.eval_every == 0 || epoch == tc.epochs);
        let (ap, mr2, ji) = if do_eval {
            let (ap, mr2, ji) = validate(model, val)?;
            (Some(ap), mr2, Some(ji))
        } else {
            (None, None, None)
        };
        let row = TrainLogRow {
            epoch,
            loss: mean.total,
            enc_cls: mean.enc_cls,
            enc_box: mean.enc_box,
            dec_cls: mean.dec_cls,
            dec_box: mean.dec_box,
            ap,
            mr2,
            ji,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(log)
}
