//! Minimum-cost bipartite assignment between predictions and ground truth.

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::losses::{sigmoid, LossWeights};

/// Dense cost matrix; rows are predictions, columns ground-truth instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost matrix");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&mut self, other: &CostMatrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// `(prediction, ground truth)` pairs, sorted by ground-truth index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Total cost, summed in ground-truth order.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, col)| c.get(r, col)).sum()
    }

    /// Prediction matched to ground truth `gt`.
    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }

    /// Ground truth matched to prediction `pred`.
    pub fn gt_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }

    /// Per-prediction lookup table of length `num_preds`.
    pub fn gt_by_pred(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Assign every column to a distinct row at minimum total cost.
///
/// Shortest augmenting paths with dual potentials, O(cols² · rows).
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (c.cols, c.rows);
    if n > m {
        return Err(Error::MoreTruthsThanQueries { truths: n, queries: m });
    }
    for r in 0..m {
        for col in 0..n {
            if !c.get(r, col).is_finite() {
                return Err(Error::NonFiniteCost { row: r, col });
            }
        }
    }
    if n == 0 {
        return Ok(Assignment::default());
    }
    // Internally the ground truths are the "workers" (1-based) and predictions the "jobs".
    let cost = |gt: usize, pred: usize| c.get(pred - 1, gt - 1);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|p| p.1);
    Ok(Assignment { pairs })
}

fn l1(a: BBox, b: BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// `λ_i (1 − objectness) + λ_ℓ1 |b − b̂|₁ + λ_GIoU (1 − giou)`; `objectness` is a probability.
pub fn individual_match_cost(
    pred_boxes: &[BBox],
    pred_objectness: &[f64],
    gt_boxes: &[BBox],
    w: &LossWeights,
) -> CostMatrix {
    assert_eq!(pred_boxes.len(), pred_objectness.len());
    CostMatrix::from_fn(pred_boxes.len(), gt_boxes.len(), |r, c| {
        let (p, g) = (pred_boxes[r], gt_boxes[c]);
        w.ind * (1.0 - pred_objectness[r]) + w.l1 * l1(p, g) + w.giou * (1.0 - giou(p, g))
    })
}

/// `λ_c Σ_k |σ(c_k) − t_k| + λ_ℓ1 |g − ĝ|₁ + λ_GIoU (1 − giou)`.
pub fn group_match_cost(
    pred_group_boxes: &[BBox],
    pred_class_logits: &[Vec<f64>],
    gt_group_boxes: &[BBox],
    gt_class_vectors: &[Vec<bool>],
    w: &LossWeights,
) -> CostMatrix {
    assert_eq!(pred_group_boxes.len(), pred_class_logits.len());
    assert_eq!(gt_group_boxes.len(), gt_class_vectors.len());
    let probs: Vec<Vec<f64>> = pred_class_logits.iter().map(|r| r.iter().map(|&x| sigmoid(x)).collect()).collect();
    CostMatrix::from_fn(pred_group_boxes.len(), gt_group_boxes.len(), |r, c| {
        let (p, g) = (pred_group_boxes[r], gt_group_boxes[c]);
        assert_eq!(probs[r].len(), gt_class_vectors[c].len(), "class count mismatch");
        let cls: f64 = probs[r].iter().zip(&gt_class_vectors[c]).map(|(&p, &t)| (p - if t { 1.0 } else { 0.0 }).abs()).sum();
        w.cls * cls + w.l1 * l1(p, g) + w.giou * (1.0 - giou(p, g))
    })
}

/// Optional association agreement for group matching: mean BCE between a
/// predicted group's similarity row and a ground-truth membership row, read
/// at the queries already matched to the ground-truth individuals.
///
/// `similarity[r][q]` are logits; `matched_query[j]` is the individual query
/// assigned to ground-truth person `j`; `membership[c][j]` is `a_c(j)`.
pub fn association_match_cost(
    similarity: &[Vec<f64>],
    membership: &[Vec<bool>],
    matched_query: &[usize],
) -> CostMatrix {
    let people = matched_query.len();
    CostMatrix::from_fn(similarity.len(), membership.len(), |r, c| {
        if people == 0 {
            return 0.0;
        }
        let total: f64 = matched_query
            .iter()
            .zip(&membership[c])
            .map(|(&q, &a)| crate::losses::bce_with_logit(similarity[r][q], a))
            .sum();
        total / people as f64
    })
}

/// Representative agreement for individual matching: for each ground-truth
/// person `j`, the mean over the groups containing `j` of the softmax
/// cross-entropy of the matched group's similarity row at query `q`.
///
/// `group_rows[c]` is the similarity row of the query matched to ground-truth
/// group `c`. Persons outside every group cost 0.
pub fn representative_match_cost(group_rows: &[Vec<f64>], membership: &[Vec<bool>], people: usize) -> CostMatrix {
    assert_eq!(group_rows.len(), membership.len());
    let queries = group_rows.first().map_or(0, Vec::len);
    let log_softmax: Vec<Vec<f64>> = group_rows
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.iter().map(|&v| v - lse).collect()
        })
        .collect();
    CostMatrix::from_fn(queries, people, |q, j| {
        let groups: Vec<usize> = (0..membership.len()).filter(|&c| membership[c][j]).collect();
        if groups.is_empty() {
            return 0.0;
        }
        -groups.iter().map(|&c| log_softmax[c][q]).sum::<f64>() / groups.len() as f64
    })
}
