//! Synthetic crowded scenes: clustered ground-truth boxes rendered onto a
//! coarse feature grid.
//!
//! Every cell carries four channels computed over the boxes overlapping it
//! with positive area: occupancy count, mean center offset along x and y
//! (in cell units, relative to the cell center) and mean box scale
//! `sqrt(w * h)` in cell units. Gaussian noise is added to all channels.

use crate::boxgeom::BBox;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene parameter: {0}")]
    InvalidParams(String),
    #[error("train fraction {0} outside (0, 1)")]
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenParams {
    pub mean_objects: f64,
    pub clusters: usize,
    /// Standard deviation of object centers around their cluster center.
    pub cluster_spread: f64,
    /// Range of box widths, normalized units.
    pub min_size: f64,
    pub max_size: f64,
    /// Height-to-width ratio of every box.
    pub aspect: f64,
    pub noise: f64,
    pub grid: usize,
    pub seed: u64,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        Self {
            mean_objects: 8.0,
            clusters: 3,
            cluster_spread: 0.12,
            min_size: 0.08,
            max_size: 0.16,
            aspect: 2.0,
            noise: 0.02,
            grid: 16,
            seed: 0,
        }
    }
}

/// Named crowd-density presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityTier {
    Sparse,
    Medium,
    Dense,
}

impl DensityTier {
    pub fn mean_objects(self) -> f64 {
        match self {
            DensityTier::Sparse => 3.0,
            DensityTier::Medium => 8.0,
            DensityTier::Dense => 15.0,
        }
    }

    pub fn params(self, grid: usize, seed: u64) -> SceneGenParams {
        SceneGenParams {
            mean_objects: self.mean_objects(),
            grid,
            seed,
            ..SceneGenParams::default()
        }
    }
}

impl SceneGenParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidParams(m.to_string()));
        if !(self.mean_objects >= 1.0) {
            return bad("mean_objects must be >= 1");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be >= 0");
        }
        if self.clusters == 0 || self.grid == 0 {
            return bad("clusters and grid must be >= 1");
        }
        if !(self.min_size > 0.0 && self.max_size >= self.min_size && self.aspect > 0.0) {
            return bad("box sizes must satisfy 0 < min_size <= max_size and aspect > 0");
        }
        if !(self.cluster_spread >= 0.0) {
            return bad("cluster_spread must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub gt_boxes: Vec<BBox>,
    pub grid: usize,
    /// `grid x grid x CHANNELS`, row-major with channels innermost.
    pub features: Vec<f64>,
    pub density: usize,
}

impl Scene {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `n` scenes; scene `i` depends only on `(params, i)`.
pub fn generate(params: &SceneGenParams, n: usize) -> Result<Vec<Scene>, SceneError> {
    params.validate()?;
    (0..n).map(|i| generate_one(params, i)).collect()
}

pub fn generate_one(params: &SceneGenParams, index: usize) -> Result<Scene, SceneError> {
    params.validate()?;
    let mut rng = scene_rng(params.seed, index as u64);
    let poisson =
        Poisson::new(params.mean_objects).map_err(|e| SceneError::InvalidParams(e.to_string()))?;
    let count = (poisson.sample(&mut rng) as usize).max(1);
    let centers: Vec<(f64, f64)> = (0..params.clusters)
        .map(|_| (rng.random_range(0.2..=0.8), rng.random_range(0.2..=0.8)))
        .collect();
    let spread = Normal::new(0.0, params.cluster_spread)
        .map_err(|e| SceneError::InvalidParams(e.to_string()))?;
    let mut gt_boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let (ccx, ccy) = centers[rng.random_range(0..centers.len())];
        let cx = (ccx + spread.sample(&mut rng)).clamp(0.02, 0.98);
        let cy = (ccy + spread.sample(&mut rng)).clamp(0.02, 0.98);
        let w = rng.random_range(params.min_size..=params.max_size);
        gt_boxes.push(BBox {
            cx,
            cy,
            w,
            h: w * params.aspect,
        });
    }
    let noise_seed = rng.random::<u64>();
    let features = render_features(&gt_boxes, params.grid, params.noise, noise_seed);
    Ok(Scene {
        image_id: format!("scene-{index:05}"),
        density: gt_boxes.len(),
        gt_boxes,
        grid: params.grid,
        features,
    })
}

/// Renders the four-channel feature grid for a set of boxes.
pub fn render_features(gt_boxes: &[BBox], grid: usize, noise: f64, seed: u64) -> Vec<f64> {
    let g = grid as f64;
    let mut sums = vec![0.0; grid * grid * CHANNELS];
    for b in gt_boxes {
        let [x1, y1, x2, y2] = b.corners();
        let scale = (b.w * b.h).sqrt() * g;
        // cells whose open interior intersects the box
        let c0 = ((x1 * g).floor().max(0.0)) as usize;
        let r0 = ((y1 * g).floor().max(0.0)) as usize;
        let c1 = ((x2 * g).ceil().min(g)) as usize;
        let r1 = ((y2 * g).ceil().min(g)) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                let (lo_x, hi_x) = (c as f64 / g, (c + 1) as f64 / g);
                let (lo_y, hi_y) = (r as f64 / g, (r + 1) as f64 / g);
                let iw = x2.min(hi_x) - x1.max(lo_x);
                let ih = y2.min(hi_y) - y1.max(lo_y);
                if iw <= 0.0 || ih <= 0.0 {
                    continue;
                }
                let at = (r * grid + c) * CHANNELS;
                sums[at] += 1.0;
                sums[at + 1] += (b.cx - (c as f64 + 0.5) / g) * g;
                sums[at + 2] += (b.cy - (r as f64 + 0.5) / g) * g;
                sums[at + 3] += scale;
            }
        }
    }
    for cell in sums.chunks_mut(CHANNELS) {
        let n = cell[0];
        if n > 0.0 {
            for v in &mut cell[1..] {
                *v /= n;
            }
        }
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).expect("noise is finite and non-negative");
        for v in &mut sums {
            *v += normal.sample(&mut rng);
        }
    }
    sums
}

/// Deterministic shuffled split into `(train, validation)`.
pub fn split(
    scenes: &[Scene],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Scene>, Vec<Scene>), SceneError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SceneError::Fraction(train_fraction));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (scenes.len() as f64 * train_fraction).round() as usize;
    let (a, b) = order.split_at(n_train);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| scenes[i].clone()).collect()
    };
    Ok((take(a), take(b)))
}
