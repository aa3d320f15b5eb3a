//! Axis-aligned boxes in normalized center form and the IoU family of kernels.

use crate::tensor::{self, Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("degenerate box {0:?}: width and height must be positive and finite")]
    Degenerate([f64; 4]),
}

/// Axis-aligned box stored as `(cx, cy, w, h)` in normalized image units.
///
/// Boxes are not clipped to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;

    fn try_from(a: [f64; 4]) -> Result<Self, GeomError> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeomError::Degenerate(self.to_array()));
        }
        Ok(())
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeomError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Scales about the point `(px, py)` by a positive factor.
    pub fn scale_about(&self, px: f64, py: f64, s: f64) -> Self {
        Self {
            cx: px + (self.cx - px) * s,
            cy: py + (self.cy - py) * s,
            w: self.w * s,
            h: self.h * s,
        }
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &BBox, b: &BBox) -> Result<Overlap, GeomError> {
    a.validate()?;
    b.validate()?;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corners as the overlap, so a box against itself
    // gives inter == union == enclosing exactly.
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Ok(Overlap {
        inter,
        union,
        enclosing,
    })
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeomError> {
    let o = overlap(a, b)?;
    Ok((o.inter / o.union).clamp(0.0, 1.0))
}

/// Generalized IoU: `IoU - (C - U) / C` with `C` the enclosing-box area.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64, GeomError> {
    let o = overlap(a, b)?;
    let iou = (o.inter / o.union).clamp(0.0, 1.0);
    Ok(iou - (o.enclosing - o.union) / o.enclosing)
}

pub fn iou_distance(a: &BBox, b: &BBox) -> Result<f64, GeomError> {
    Ok(1.0 - iou(a, b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Iou,
    Giou,
    IouDistance,
}

impl Kernel {
    pub fn eval(self, a: &BBox, b: &BBox) -> Result<f64, GeomError> {
        match self {
            Kernel::Iou => iou(a, b),
            Kernel::Giou => giou(a, b),
            Kernel::IouDistance => iou_distance(a, b),
        }
    }
}

/// Dense `rows x cols` matrix of kernel values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PairwiseMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn pairwise(kernel: Kernel, a: &[BBox], b: &[BBox]) -> Result<PairwiseMatrix, GeomError> {
    let mut values = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            values.push(kernel.eval(x, y)?);
        }
    }
    Ok(PairwiseMatrix {
        rows: a.len(),
        cols: b.len(),
        values,
    })
}

/// Differentiable GIoU between corresponding rows of two `[n, 4]` center-form
/// box tensors. Returns an `[n, 1]` tensor.
pub fn tape_giou(tape: &mut Tape, pred: Var, target: Var) -> tensor::Result<Var> {
    let [px1, py1, px2, py2] = tape_corners(tape, pred)?;
    let [tx1, ty1, tx2, ty2] = tape_corners(tape, target)?;

    let ix1 = tape.maximum(px1, tx1)?;
    let iy1 = tape.maximum(py1, ty1)?;
    let ix2 = tape.minimum(px2, tx2)?;
    let iy2 = tape.minimum(py2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;

    let pa = tape_area(tape, pred)?;
    let ta = tape_area(tape, target)?;
    let sum = tape.add(pa, ta)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.minimum(px1, tx1)?;
    let ey1 = tape.minimum(py1, ty1)?;
    let ex2 = tape.maximum(px2, tx2)?;
    let ey2 = tape.maximum(py2, ty2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;
    let slack = tape.sub(enclosing, union)?;
    let penalty = tape.div(slack, enclosing)?;
    tape.sub(iou, penalty)
}

fn tape_corners(tape: &mut Tape, boxes: Var) -> tensor::Result<[Var; 4]> {
    let cx = tape.slice(boxes, 1, 0, 1)?;
    let cy = tape.slice(boxes, 1, 1, 1)?;
    let w = tape.slice(boxes, 1, 2, 1)?;
    let h = tape.slice(boxes, 1, 3, 1)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

fn tape_area(tape: &mut Tape, boxes: Var) -> tensor::Result<Var> {
    let w = tape.slice(boxes, 1, 2, 1)?;
    let h = tape.slice(boxes, 1, 3, 1)?;
    tape.mul(w, h)
}
