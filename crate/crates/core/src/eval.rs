//! Detection metrics and diagnostics: AP, log-average miss rate, Jaccard
//! index, TP/FP histograms and query-homogeneity statistics.
//!
//! Per-image inputs are passed as aligned slices: `dets[i]` and `gts[i]`
//! belong to the same image.

use crate::assign::{hungarian, CostMatrix};
use crate::boxgeom::{iou, BBox, GeomError};
use crate::dcg::Query;
use crate::suppress::{score_order, Detection};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const MISS_RATE_FLOOR: f64 = 1e-4;
pub const POSITIVE_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{0} detection lists for {1} images")]
    Misaligned(usize, usize),
    #[error("metric undefined: no ground truth boxes")]
    NoGroundTruth,
    #[error("no images")]
    NoImages,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Detection-to-GT correspondence for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalMatch {
    /// Matched GT of each detection, in input order.
    pub det_to_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl EvalMatch {
    pub fn tp(&self) -> usize {
        self.det_to_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.det_to_gt.len() - self.tp()
    }
}

/// Each detection, in descending score order, takes the highest-IoU
/// unmatched GT whose IoU is at least `iou_thresh`.
pub fn greedy_match(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Result<EvalMatch> {
    let mut m = EvalMatch {
        det_to_gt: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for k in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if m.gt_matched[g] {
                continue;
            }
            let o = iou(&dets[k].bbox, gt)?;
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            m.gt_matched[g] = true;
            m.det_to_gt[k] = Some(g);
        }
    }
    Ok(m)
}

fn check_aligned(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(EvalError::Misaligned(dets.len(), gts.len()));
    }
    Ok(())
}

/// Pooled `(score, is_tp)` over all images, sorted by descending score with
/// ties in (image, detection) order.
fn pooled_outcomes(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
) -> Result<Vec<(f64, bool)>> {
    check_aligned(dets, gts)?;
    let mut out = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let m = greedy_match(d, g, iou_thresh)?;
        out.extend(
            d.iter()
                .zip(&m.det_to_gt)
                .map(|(det, mg)| (det.score, mg.is_some())),
        );
    }
    // stable sort keeps the (image, index) tie order
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    Ok(out)
}

/// All-point area under the precision-recall curve.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
) -> Result<f64> {
    let outcomes = pooled_outcomes(dets, gts, iou_thresh)?;
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(if outcomes.is_empty() { 1.0 } else { 0.0 });
    }
    let mut recall = Vec::with_capacity(outcomes.len());
    let mut precision = Vec::with_capacity(outcomes.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &outcomes {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Ok(ap)
}

/// One point of the miss-rate curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissRatePoint {
    pub fppi: f64,
    pub miss_rate: f64,
}

/// `(FPPI, miss rate)` after each distinct score threshold, highest first.
pub fn miss_rate_curve(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
) -> Result<Vec<MissRatePoint>> {
    if gts.is_empty() {
        return Err(EvalError::NoImages);
    }
    let outcomes = pooled_outcomes(dets, gts, iou_thresh)?;
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let n_img = gts.len() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, is_tp)) in outcomes.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = outcomes.get(k + 1).is_none_or(|next| next.0 != score);
        if last_of_score {
            points.push(MissRatePoint {
                fppi: fp as f64 / n_img,
                miss_rate: 1.0 - tp as f64 / n_gt as f64,
            });
        }
    }
    Ok(points)
}

/// The nine FPPI references, log-uniform in `[1e-2, 1]`.
pub fn fppi_references() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / 8.0))
}

/// Log-average miss rate over the FPPI references, clamped below at
/// [`MISS_RATE_FLOOR`]. A result at the floor is reported as 0.
pub fn mr2(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<f64> {
    let curve = miss_rate_curve(dets, gts, iou_thresh)?;
    let mut log_sum = 0.0;
    let mut all_floor = true;
    for r in fppi_references() {
        let mr = curve
            .iter()
            .rev()
            .find(|p| p.fppi <= r)
            .map_or(1.0, |p| p.miss_rate)
            .max(MISS_RATE_FLOOR);
        all_floor &= mr == MISS_RATE_FLOOR;
        log_sum += mr.ln();
    }
    if all_floor {
        return Ok(0.0);
    }
    Ok((log_sum / 9.0).exp())
}

/// Score thresholds swept by [`jaccard_index`]: 0.05, 0.10, ..., 0.95.
pub fn ji_thresholds() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Size of a maximum one-to-one matching among pairs with IoU at least
/// `iou_thresh`.
pub fn max_iou_matching(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> Result<usize> {
    if dets.is_empty() || gts.is_empty() {
        return Ok(0);
    }
    // any single barred pair costs more than a full feasible matching
    let barrier = (dets.len().min(gts.len()) + 1) as f64 * 2.0;
    let mut values = Vec::with_capacity(dets.len() * gts.len());
    let mut feasible = Vec::with_capacity(dets.len() * gts.len());
    for d in dets {
        for g in gts {
            let o = iou(d, g)?;
            let ok = o >= iou_thresh;
            feasible.push(ok);
            values.push(if ok { 1.0 - o } else { barrier });
        }
    }
    let cost = CostMatrix::new(dets.len(), gts.len(), values)
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    let a = hungarian(&cost);
    Ok(a.pairs
        .iter()
        .filter(|&&(r, c)| feasible[r * gts.len() + c])
        .count())
}

/// Dataset-level Jaccard index, maximized over the score-threshold sweep.
/// Returns `(ji, best_threshold)`; the lowest threshold wins ties.
pub fn jaccard_index(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
) -> Result<(f64, f64)> {
    check_aligned(dets, gts)?;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in ji_thresholds() {
        let (mut m, mut nd, mut ng) = (0usize, 0usize, 0usize);
        for (d, g) in dets.iter().zip(gts) {
            let kept: Vec<BBox> = d.iter().filter(|x| x.score > t).map(|x| x.bbox).collect();
            m += max_iou_matching(&kept, g, iou_thresh)?;
            nd += kept.len();
            ng += g.len();
        }
        let denom = nd + ng - m;
        let ji = if denom == 0 {
            1.0
        } else {
            m as f64 / denom as f64
        };
        if ji > best.0 {
            best = (ji, t);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinCount {
    pub lo: f64,
    pub hi: f64,
    pub tp: usize,
    pub fp: usize,
}

/// TP/FP counts by detection score in `bins` equal-width bins over `[0, 1]`.
/// A score of exactly 1 lands in the last bin.
pub fn tp_fp_by_confidence(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
    bins: usize,
) -> Result<Vec<BinCount>> {
    check_aligned(dets, gts)?;
    if bins == 0 {
        return Err(EvalError::Invalid("bins must be >= 1".into()));
    }
    let mut out: Vec<BinCount> = (0..bins)
        .map(|b| BinCount {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            tp: 0,
            fp: 0,
        })
        .collect();
    for (d, g) in dets.iter().zip(gts) {
        let m = greedy_match(d, g, iou_thresh)?;
        for (det, mg) in d.iter().zip(&m.det_to_gt) {
            let b = ((det.score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            if mg.is_some() {
                out[b].tp += 1;
            } else {
                out[b].fp += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityBinCount {
    /// Inclusive lower and exclusive upper GT count; `None` is unbounded.
    pub min_gts: usize,
    pub max_gts: Option<usize>,
    pub images: usize,
    pub tp: usize,
    pub fp: usize,
}

/// TP/FP counts grouped by per-image GT count. `edges` are ascending lower
/// bounds; bin `k` covers `[edges[k], edges[k + 1])` and the last bin is
/// open-ended. Images below `edges[0]` are skipped.
pub fn tp_fp_by_density(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
    edges: &[usize],
) -> Result<Vec<DensityBinCount>> {
    check_aligned(dets, gts)?;
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Invalid(
            "density edges must be non-empty and strictly ascending".into(),
        ));
    }
    let mut out: Vec<DensityBinCount> = edges
        .iter()
        .enumerate()
        .map(|(k, &lo)| DensityBinCount {
            min_gts: lo,
            max_gts: edges.get(k + 1).copied(),
            images: 0,
            tp: 0,
            fp: 0,
        })
        .collect();
    for (d, g) in dets.iter().zip(gts) {
        let Some(b) = edges.iter().rposition(|&e| g.len() >= e) else {
            continue;
        };
        let m = greedy_match(d, g, iou_thresh)?;
        out[b].images += 1;
        out[b].tp += m.tp();
        out[b].fp += m.fp();
    }
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityPoint {
    pub iou_distance: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HomogeneityScatter {
    pub points: Vec<HomogeneityPoint>,
    /// Pearson correlation of cosine similarity with IoU proximity.
    pub correlation: Option<f64>,
}

/// Pairwise `(1 - IoU, cosine)` over queries with confidence at least
/// `positive_floor`.
pub fn homogeneity_scatter(queries: &[Query], positive_floor: f64) -> Result<HomogeneityScatter> {
    let kept: Vec<&Query> = queries
        .iter()
        .filter(|q| q.confidence >= positive_floor)
        .collect();
    if kept.len() < 2 {
        return Ok(HomogeneityScatter::default());
    }
    let mut points = Vec::new();
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            points.push(HomogeneityPoint {
                iou_distance: 1.0 - iou(&kept[i].ref_box, &kept[j].ref_box)?,
                cosine: cosine_similarity(&kept[i].content, &kept[j].content),
            });
        }
    }
    let cos: Vec<f64> = points.iter().map(|p| p.cosine).collect();
    let prox: Vec<f64> = points.iter().map(|p| 1.0 - p.iou_distance).collect();
    Ok(HomogeneityScatter {
        correlation: pearson(&cos, &prox),
        points,
    })
}

/// `(score, best IoU with any GT of the same image)` for every detection.
pub fn score_iou_pairs(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> Result<Vec<(f64, f64)>> {
    check_aligned(dets, gts)?;
    let mut out = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        for det in d {
            let mut best = 0.0f64;
            for gt in g {
                best = best.max(iou(&det.bbox, gt)?);
            }
            out.push((det.score, best));
        }
    }
    Ok(out)
}

pub fn score_iou_correlation(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> Result<Option<f64>> {
    let pairs = score_iou_pairs(dets, gts)?;
    let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let o: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(pearson(&s, &o))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_thresh: f64,
    pub confidence_bins: usize,
    pub hist_iou_thresh: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_thresh: DEFAULT_IOU_THRESH,
            confidence_bins: 10,
            hist_iou_thresh: 0.8,
        }
    }
}

pub const DENSITY_EDGES: [usize; 4] = [1, 5, 10, 15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub ap: f64,
    /// `None` when no image has ground truth.
    pub mr2: Option<f64>,
    pub ji: f64,
    pub ji_best_threshold: f64,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub iou_thresh: f64,
    pub images: usize,
    pub ap: f64,
    pub mr2: Option<f64>,
    pub ji: f64,
    pub ji_best_threshold: f64,
    pub stages: Vec<StageMetrics>,
    pub hist_iou_thresh: f64,
    pub tp_fp_by_confidence: Vec<BinCount>,
    pub tp_fp_by_density: Vec<DensityBinCount>,
}

pub fn stage_metrics(
    stage: usize,
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thresh: f64,
) -> Result<StageMetrics> {
    let (ji, t) = jaccard_index(dets, gts, iou_thresh)?;
    Ok(StageMetrics {
        stage,
        ap: average_precision(dets, gts, iou_thresh)?,
        mr2: match mr2(dets, gts, iou_thresh) {
            Ok(v) => Some(v),
            Err(EvalError::NoGroundTruth | EvalError::NoImages) => None,
            Err(e) => return Err(e),
        },
        ji,
        ji_best_threshold: t,
    })
}

/// Headline metrics on `final_dets` plus per-stage variants.
///
/// `stages` holds `(stage index, per-image detections)`; it may be empty.
pub fn evaluate(
    final_dets: &[Vec<Detection>],
    stages: &[(usize, Vec<Vec<Detection>>)],
    gts: &[Vec<BBox>],
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let head = stage_metrics(usize::MAX, final_dets, gts, settings.iou_thresh)?;
    let per_stage = stages
        .iter()
        .map(|(s, d)| stage_metrics(*s, d, gts, settings.iou_thresh))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        iou_thresh: settings.iou_thresh,
        images: gts.len(),
        ap: head.ap,
        mr2: head.mr2,
        ji: head.ji,
        ji_best_threshold: head.ji_best_threshold,
        stages: per_stage,
        hist_iou_thresh: settings.hist_iou_thresh,
        tp_fp_by_confidence: tp_fp_by_confidence(
            final_dets,
            gts,
            settings.hist_iou_thresh,
            settings.confidence_bins,
        )?,
        tp_fp_by_density: tp_fp_by_density(
            final_dets,
            gts,
            settings.hist_iou_thresh,
            &DENSITY_EDGES,
        )?,
    })
}
