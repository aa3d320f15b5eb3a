//! Greedy box-level de-duplication: NMS, Soft-NMS and adaptive NMS.
//!
//! Suppression uses the strict test `IoU > threshold`; a neighbor whose IoU
//! equals the threshold survives.

use crate::boxgeom::{iou, BBox, GeomError};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SuppressError {
    #[error("{0} densities supplied for {1} detections")]
    MissingDensity(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// A scored box emitted by a detector head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, score: f64) -> Self {
        Self {
            image_id: image_id.into(),
            bbox,
            score,
            stage: None,
        }
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<usize>, SuppressError> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(SuppressError::InvalidParameter(format!(
            "iou_thresh {iou_thresh}"
        )));
    }
    greedy(dets, |_| iou_thresh)
}

/// NMS where each kept box suppresses with `max(base_thresh, density)`.
pub fn adaptive_nms(
    dets: &[Detection],
    densities: &[f64],
    base_thresh: f64,
) -> Result<Vec<usize>, SuppressError> {
    if densities.len() != dets.len() {
        return Err(SuppressError::MissingDensity(densities.len(), dets.len()));
    }
    greedy(dets, |k| base_thresh.max(densities[k]))
}

fn greedy(
    dets: &[Detection],
    thresh_of: impl Fn(usize) -> f64,
) -> Result<Vec<usize>, SuppressError> {
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &k) in order.iter().enumerate() {
        if suppressed[k] {
            continue;
        }
        kept.push(k);
        let t = thresh_of(k);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[k].bbox, &dets[j].bbox)? > t {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Gaussian Soft-NMS. Repeatedly selects the highest remaining score and
/// decays every other remaining score by `exp(-IoU^2 / sigma)`; detections
/// whose score falls below `score_floor` are dropped. Output is in
/// selection order.
pub fn soft_nms(
    dets: &[Detection],
    sigma: f64,
    score_floor: f64,
) -> Result<Vec<Detection>, SuppressError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(SuppressError::InvalidParameter(format!("sigma {sigma}")));
    }
    let mut pool: Vec<Detection> = score_order(dets)
        .into_iter()
        .map(|k| dets[k].clone())
        .filter(|d| d.score >= score_floor)
        .collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for (k, d) in pool.iter().enumerate().skip(1) {
            if d.score > pool[best].score {
                best = k;
            }
        }
        let top = pool.remove(best);
        for d in &mut pool {
            let o = iou(&top.bbox, &d.bbox)?;
            d.score *= (-(o * o) / sigma).exp();
        }
        pool.retain(|d| d.score >= score_floor);
        out.push(top);
    }
    Ok(out)
}

/// Ground-truth-side crowd density: max IoU of each box with any other box.
pub fn gt_density(boxes: &[BBox]) -> Result<Vec<f64>, SuppressError> {
    let mut out = vec![0.0; boxes.len()];
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            if i != j {
                out[i] = f64::max(out[i], iou(&boxes[i], &boxes[j])?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, w: f64, score: f64) -> Detection {
        Detection::new("img", BBox::new(cx, 0.5, w, 0.2).unwrap(), score)
    }

    /// Two boxes with IoU 0.6: equal heights, width 1, overlap 0.75 in x.
    fn overlapping_pair() -> Vec<Detection> {
        // inter = 0.75, union = 1.25 -> 0.6
        vec![det(0.5, 1.0, 0.9), det(0.75, 1.0, 0.8)]
    }

    #[test]
    fn nms_drops_overlapping_lower_score() {
        let d = overlapping_pair();
        assert!((iou(&d[0].bbox, &d[1].bbox).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(nms(&d, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn nms_keeps_disjoint_and_single() {
        let d = vec![det(0.1, 0.1, 0.5), det(0.8, 0.1, 0.7)];
        assert_eq!(nms(&d, 0.5).unwrap(), vec![1, 0]);
        assert_eq!(nms(&d[..1], 0.5).unwrap(), vec![0]);
        assert!(nms(&[], 0.5).unwrap().is_empty());
    }

    #[test]
    fn soft_nms_decay() {
        let d = overlapping_pair();
        let out = soft_nms(&d, 0.5, 0.0).unwrap();
        assert_eq!(out[0].score, 0.9);
        let expected = 0.8 * (-0.72f64).exp();
        assert!((out[1].score - expected).abs() < 1e-12);
        assert!((out[1].score - 0.389401).abs() < 1e-6);
    }

    #[test]
    fn soft_nms_untouched_when_disjoint() {
        let d = vec![det(0.1, 0.1, 0.5), det(0.8, 0.1, 0.7)];
        let out = soft_nms(&d, 0.5, 0.0).unwrap();
        assert_eq!(out[1].score, 0.5);
    }

    #[test]
    fn soft_nms_floor_one_keeps_at_most_top() {
        let mut d = overlapping_pair();
        d[0].score = 1.0;
        assert!(soft_nms(&d, 0.5, 1.0).unwrap().len() <= 1);
    }

    #[test]
    fn adaptive_reduces_to_nms() {
        let d = overlapping_pair();
        assert_eq!(
            adaptive_nms(&d, &[0.0, 0.0], 0.5).unwrap(),
            nms(&d, 0.5).unwrap()
        );
        assert_eq!(
            adaptive_nms(&d, &[0.3, 0.4], 0.5).unwrap(),
            nms(&d, 0.5).unwrap()
        );
    }

    #[test]
    fn adaptive_dense_neighbor_survives() {
        // IoU 0.8: overlap 8/9 of width 1 -> inter 8/9, union 10/9
        let d = vec![det(0.5, 1.0, 0.9), det(0.5 + 1.0 / 9.0, 1.0, 0.8)];
        assert!((iou(&d[0].bbox, &d[1].bbox).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(adaptive_nms(&d, &[0.9, 0.9], 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn adaptive_requires_densities() {
        let d = overlapping_pair();
        assert!(matches!(
            adaptive_nms(&d, &[0.1], 0.5),
            Err(SuppressError::MissingDensity(1, 2))
        ));
    }

    #[test]
    fn density_is_max_overlap() {
        let b = [
            BBox::new(0.5, 0.5, 1.0, 0.2).unwrap(),
            BBox::new(0.75, 0.5, 1.0, 0.2).unwrap(),
            BBox::new(5.0, 5.0, 0.1, 0.1).unwrap(),
        ];
        let d = gt_density(&b).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.6).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }
}
