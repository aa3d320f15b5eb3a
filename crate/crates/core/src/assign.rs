//! One-to-one matching between predictions and ground truths.

use crate::boxgeom::{giou, BBox, GeomError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssignError {
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("cost matrix needs {expected} entries, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("brute force supports at most {limit} assignments per side, got {size}")]
    TooLarge { size: usize, limit: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Row-major costs: rows are predictions, columns are ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AssignError> {
        if values.len() != rows * cols {
            return Err(AssignError::BadLength {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(AssignError::NonFinite {
                what: "cost",
                index,
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignError> {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn transposed(&self) -> Self {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// A partial one-to-one pairing of predictions with ground truths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(prediction, gt)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_predictions: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_gts: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    /// Sum of the paired costs, accumulated in prediction order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }

    /// GT index matched to each prediction, if any.
    pub fn gt_of_prediction(&self, n_predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_predictions];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }

    /// True when every index appears at most once on each side.
    pub fn is_partial_injection(&self) -> bool {
        let mut preds: Vec<_> = self.pairs.iter().map(|p| p.0).collect();
        let mut gts: Vec<_> = self.pairs.iter().map(|p| p.1).collect();
        preds.sort_unstable();
        gts.sort_unstable();
        preds.windows(2).all(|w| w[0] != w[1]) && gts.windows(2).all(|w| w[0] != w[1])
    }
}

/// Classification term of the match cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassCost {
    /// `-score`.
    Linear,
    /// Focal-style cost `pos - neg` as used by deformable DETR.
    Focal { alpha: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `cls * class_cost(score) + l1 * L1(box, gt) + giou * (1 - GIoU(box, gt))`.
pub fn match_cost(
    preds: &[(BBox, f64)],
    gts: &[BBox],
    weights: CostWeights,
    class_cost: ClassCost,
) -> Result<CostMatrix, AssignError> {
    let mut values = Vec::with_capacity(preds.len() * gts.len());
    for (i, (b, score)) in preds.iter().enumerate() {
        if !score.is_finite() {
            return Err(AssignError::NonFinite {
                what: "score",
                index: i,
            });
        }
        b.validate()?;
        let cls = match class_cost {
            ClassCost::Linear => -score,
            ClassCost::Focal { alpha, gamma } => {
                let p = score.clamp(1e-12, 1.0 - 1e-12);
                let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
                let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
                pos - neg
            }
        };
        for g in gts {
            values.push(
                weights.cls * cls + weights.l1 * b.l1(g) + weights.giou * (1.0 - giou(b, g)?),
            );
        }
    }
    CostMatrix::new(preds.len(), gts.len(), values)
}

/// Minimum-total-cost one-to-one assignment of size `min(rows, cols)`.
///
/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(n^2 m)` for `n <= m`. Rows are inserted in index order and column scans
/// use strict comparisons, so results are deterministic.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    if cost.rows == 0 || cost.cols == 0 {
        return Assignment::from_pairs(vec![], cost.rows, cost.cols);
    }
    if cost.rows > cost.cols {
        let pairs = solve_wide(&cost.transposed())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        return Assignment::from_pairs(pairs, cost.rows, cost.cols);
    }
    Assignment::from_pairs(solve_wide(cost), cost.rows, cost.cols)
}

/// Requires `rows <= cols`; returns `(row, col)` pairs covering every row.
fn solve_wide(a: &CostMatrix) -> Vec<(usize, usize)> {
    let (n, m) = (a.rows, a.cols);
    // 1-based with a sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive search over all injective maps from the smaller side into the
/// larger. The first optimum in lexicographic order wins.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment, AssignError> {
    let k = cost.rows.min(cost.cols);
    if k > BRUTE_FORCE_LIMIT {
        return Err(AssignError::TooLarge {
            size: k,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if k == 0 {
        return Ok(Assignment::from_pairs(vec![], cost.rows, cost.cols));
    }
    let wide = cost.rows <= cost.cols;
    let (n, m) = if wide {
        (cost.rows, cost.cols)
    } else {
        (cost.cols, cost.rows)
    };
    let at = |i: usize, j: usize| if wide { cost.get(i, j) } else { cost.get(j, i) };

    struct Search<'a> {
        n: usize,
        m: usize,
        at: &'a dyn Fn(usize, usize) -> f64,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, acc: f64) {
            if i == self.n {
                if self.best.as_ref().is_none_or(|(b, _)| acc < *b) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            for j in 0..self.m {
                if !self.used[j] {
                    self.used[j] = true;
                    self.current.push(j);
                    let c = (self.at)(i, j);
                    self.go(i + 1, acc + c);
                    self.current.pop();
                    self.used[j] = false;
                }
            }
        }
    }

    let mut s = Search {
        n,
        m,
        at: &at,
        used: vec![false; m],
        current: Vec::with_capacity(n),
        best: None,
    };
    s.go(0, 0.0);
    let (_, map) = s.best.expect("non-empty search space");
    let pairs = map
        .into_iter()
        .enumerate()
        .map(|(i, j)| if wide { (i, j) } else { (j, i) })
        .collect();
    Ok(Assignment::from_pairs(pairs, cost.rows, cost.cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total(&c), 2.0);
    }

    #[test]
    fn one_by_one() {
        let c = CostMatrix::from_rows(&[vec![7.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total(&c), 7.0);
    }

    #[test]
    fn three_predictions_two_gts() {
        let c = CostMatrix::from_rows(&[vec![5.0, 1.0], vec![2.0, 6.0], vec![4.0, 4.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.unmatched_predictions, vec![2]);
        assert!(a.unmatched_gts.is_empty());
        assert_eq!(a.total(&c), 3.0);
        assert_eq!(brute_force_assign(&c).unwrap().total(&c), 3.0);
    }

    #[test]
    fn empty_matrix() {
        let c = CostMatrix::new(3, 0, vec![]).unwrap();
        let a = hungarian(&c);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_predictions, vec![0, 1, 2]);
    }

    #[test]
    fn brute_force_limit() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(
            brute_force_assign(&c),
            Err(AssignError::TooLarge { .. })
        ));
    }

    #[test]
    fn perfect_prediction_cost() {
        let g = BBox::new(0.4, 0.4, 0.2, 0.3).unwrap();
        let c = match_cost(&[(g, 1.0)], &[g], CostWeights::default(), ClassCost::Linear).unwrap();
        assert_eq!(c.get(0, 0), -2.0);
    }

    #[test]
    fn far_prediction_costs_more() {
        let g = BBox::new(0.2, 0.2, 0.1, 0.1).unwrap();
        let near = BBox::new(0.21, 0.2, 0.1, 0.1).unwrap();
        let far = BBox::new(0.9, 0.9, 0.1, 0.1).unwrap();
        let c = match_cost(
            &[(near, 0.3), (far, 0.0)],
            &[g],
            CostWeights::default(),
            ClassCost::Linear,
        )
        .unwrap();
        assert!(c.get(1, 0) > c.get(0, 0));
    }

    #[test]
    fn one_prediction_two_gts() {
        let p = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let g1 = BBox::new(0.45, 0.5, 0.2, 0.2).unwrap();
        let g2 = BBox::new(0.1, 0.1, 0.1, 0.1).unwrap();
        let w = CostWeights::default();
        let both = match_cost(&[(p, 0.6)], &[g1, g2], w, ClassCost::Linear).unwrap();
        let only2 = match_cost(&[(p, 0.6)], &[g2], w, ClassCost::Linear).unwrap();
        assert_eq!((both.rows(), both.cols()), (1, 2));
        assert_eq!(both.get(0, 1), only2.get(0, 0));
    }

    #[test]
    fn non_finite_score_rejected() {
        let p = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let r = match_cost(
            &[(p, f64::NAN)],
            &[p],
            CostWeights::default(),
            ClassCost::Linear,
        );
        assert!(matches!(
            r,
            Err(AssignError::NonFinite { what: "score", .. })
        ));
    }
}
