//! Set-prediction objective: bipartite matching of predictions to ground
//! truths, focal classification loss, and L1 plus GIoU box losses.
//!
//! Every loss here returns its gradient with respect to the detector outputs
//! (per-query probabilities and sigmoid boxes) so the result can seed the
//! reverse pass of the model graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Detections;

/// Probabilities are kept inside `[CLAMP, 1 - CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{gts} ground truths exceed {queries} queries")]
    TooManyTargets { gts: usize, queries: usize },
    #[error("box has non-positive size: {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("cost matrix is empty")]
    EmptyCost,
    #[error("invalid loss parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.gamma >= 0.0) {
            return Err(LossError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub lambda_class: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            lambda_class: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_class, self.lambda_l1, self.lambda_giou];
        if all.iter().any(|w| !(*w >= 0.0)) || all.iter().all(|&w| w == 0.0) {
            return Err(LossError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `(prediction, ground truth)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

/// `-alpha (1 - p)^gamma ln p` for the probability of the correct class.
pub fn focal_loss(p: f64, params: FocalParams) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
}

/// Derivative of [`focal_loss`] with respect to `p` (zero where clamped).
pub fn focal_loss_grad(p: f64, params: FocalParams) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let FocalParams { alpha, gamma } = params;
    let q = 1.0 - p;
    let decay = if gamma == 0.0 {
        0.0
    } else {
        alpha * gamma * q.powf(gamma - 1.0) * p.ln()
    };
    decay - alpha * q.powf(gamma) / p
}

fn background(params: FocalParams) -> FocalParams {
    FocalParams {
        alpha: 1.0 - params.alpha,
        gamma: params.gamma,
    }
}

/// Focal loss of a query whose target is background, as a function of its
/// nodule probability.
pub fn background_focal_loss(prob: f64, params: FocalParams) -> f64 {
    focal_loss(1.0 - prob, background(params))
}

pub fn background_focal_loss_grad(prob: f64, params: FocalParams) -> f64 {
    -focal_loss_grad(1.0 - prob, background(params))
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// IoU and generalized IoU of two center-size boxes.
pub fn iou_giou(a: [f64; 4], b: [f64; 4]) -> Result<(f64, f64)> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) {
            return Err(LossError::DegenerateBox(bx));
        }
    }
    Ok(iou_giou_unchecked(a, b))
}

fn iou_giou_unchecked(a: [f64; 4], b: [f64; 4]) -> (f64, f64) {
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    let iou = inter / union;
    (iou, iou - (hull - union) / hull)
}

/// GIoU of `a` against fixed `b` and its gradient with respect to `a`'s
/// `(cx, cy, w, h)`.
pub fn giou_grad(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let (ca, cb) = (corners(a), corners(b));
    // Intersection extents and which corner of `a` bounds them.
    let (ix0, ix1) = (ca[0].max(cb[0]), ca[2].min(cb[2]));
    let (iy0, iy1) = (ca[1].max(cb[1]), ca[3].min(cb[3]));
    let (iw, ih) = ((ix1 - ix0).max(0.0), (iy1 - iy0).max(0.0));
    let inter = iw * ih;
    let area_a = a[2] * a[3];
    let union = area_a + b[2] * b[3] - inter;
    let (hx0, hx1) = (ca[0].min(cb[0]), ca[2].max(cb[2]));
    let (hy0, hy1) = (ca[1].min(cb[1]), ca[3].max(cb[3]));
    let (hw, hh) = (hx1 - hx0, hy1 - hy0);
    let hull = hw * hh;
    let giou = inter / union - 1.0 + union / hull;

    // d/d corners of a: [x0, y0, x1, y1]
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if ca[0] > cb[0] {
            d_inter[0] = -ih;
        }
        if ca[2] < cb[2] {
            d_inter[2] = ih;
        }
        if ca[1] > cb[1] {
            d_inter[1] = -iw;
        }
        if ca[3] < cb[3] {
            d_inter[3] = iw;
        }
    }
    let mut d_hull = [0.0; 4];
    if ca[0] < cb[0] {
        d_hull[0] = -hh;
    }
    if ca[2] > cb[2] {
        d_hull[2] = hh;
    }
    if ca[1] < cb[1] {
        d_hull[1] = -hw;
    }
    if ca[3] > cb[3] {
        d_hull[3] = hw;
    }
    // area_a = (x1 - x0)(y1 - y0)
    let (aw, ah) = (ca[2] - ca[0], ca[3] - ca[1]);
    let d_area = [-ah, -aw, ah, aw];

    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull[k]) / (hull * hull);
        d_corner[k] = d_iou + d_ratio;
    }
    // corners = (cx - w/2, cy - h/2, cx + w/2, cy + h/2)
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        (d_corner[2] - d_corner[0]) / 2.0,
        (d_corner[3] - d_corner[1]) / 2.0,
    ];
    (giou, grad)
}

fn l1(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Focal-style classification cost: positive focal term at `p` minus the
/// background focal term at `p`.
pub fn class_cost(prob: f64, params: FocalParams) -> f64 {
    focal_loss(prob, params) - background_focal_loss(prob, params)
}

/// `N_q × N_gt` matrix of matching costs, row-major.
pub fn matching_cost(
    preds: &Detections,
    gts: &[[f64; 4]],
    focal: FocalParams,
    weights: CostWeights,
) -> Vec<Vec<f64>> {
    preds
        .boxes
        .iter()
        .zip(&preds.class_prob)
        .map(|(&pb, &p)| {
            let cls = class_cost(p, focal);
            gts.iter()
                .map(|&gb| {
                    let (_, giou) = iou_giou_unchecked(pb, gb);
                    weights.lambda_class * cls + weights.lambda_l1 * l1(pb, gb)
                        - weights.lambda_giou * giou
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment for a rectangular matrix `cost[row][col]`; returns
/// `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(LossError::EmptyCost);
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> = hungarian_match(&t)?
            .pairs
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return Ok(MatchAssignment { pairs });
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(MatchAssignment { pairs })
}

/// Loss terms of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.class += o.class;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.total += o.total;
    }
}

impl LossBreakdown {
    pub fn scaled(self, s: f64) -> Self {
        LossBreakdown {
            class: self.class * s,
            l1: self.l1 * s,
            giou: self.giou * s,
            total: self.total * s,
        }
    }
}

/// Loss value, matching and gradients with respect to the detector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    /// Unweighted mean terms; `total` applies the weights.
    pub breakdown: LossBreakdown,
    pub assignment: MatchAssignment,
    pub d_prob: Vec<f64>,
    pub d_boxes: Vec<[f64; 4]>,
}

/// Hungarian-matched set loss for one image.
///
/// Matched queries pay the positive focal term plus `L1 + (1 - GIoU)`; the
/// rest pay the background focal term. Classification is averaged over the
/// queries, box terms over the ground truths, and
/// `total = λ_class·class + λ_l1·l1 + λ_giou·giou`.
pub fn set_loss(
    preds: &Detections,
    gts: &[[f64; 4]],
    focal: FocalParams,
    weights: CostWeights,
) -> Result<SetLoss> {
    let nq = preds.len();
    if gts.len() > nq {
        return Err(LossError::TooManyTargets {
            gts: gts.len(),
            queries: nq,
        });
    }
    let assignment = if gts.is_empty() {
        MatchAssignment::default()
    } else {
        hungarian_match(&matching_cost(preds, gts, focal, weights))?
    };
    let mut matched = vec![None; nq];
    for &(p, t) in &assignment.pairs {
        matched[p] = Some(t);
    }

    let mut d_prob = vec![0.0; nq];
    let mut d_boxes = vec![[0.0; 4]; nq];
    let mut class = 0.0;
    let (mut l1_sum, mut giou_sum) = (0.0, 0.0);
    let inv_q = 1.0 / nq as f64;
    let inv_g = if gts.is_empty() {
        0.0
    } else {
        1.0 / gts.len() as f64
    };
    for (i, &p) in preds.class_prob.iter().enumerate() {
        match matched[i] {
            Some(t) => {
                class += focal_loss(p, focal);
                d_prob[i] = weights.lambda_class * inv_q * focal_loss_grad(p, focal);
                let (pb, gb) = (preds.boxes[i], gts[t]);
                l1_sum += l1(pb, gb);
                let (giou, dg) = giou_grad(pb, gb);
                giou_sum += 1.0 - giou;
                for k in 0..4 {
                    let sign = if pb[k] > gb[k] {
                        1.0
                    } else if pb[k] < gb[k] {
                        -1.0
                    } else {
                        0.0
                    };
                    d_boxes[i][k] =
                        inv_g * (weights.lambda_l1 * sign - weights.lambda_giou * dg[k]);
                }
            }
            None => {
                class += background_focal_loss(p, focal);
                d_prob[i] = weights.lambda_class * inv_q * background_focal_loss_grad(p, focal);
            }
        }
    }
    let class = class * inv_q;
    let (l1m, gm) = (l1_sum * inv_g, giou_sum * inv_g);
    Ok(SetLoss {
        breakdown: LossBreakdown {
            class,
            l1: l1m,
            giou: gm,
            total: weights.lambda_class * class
                + weights.lambda_l1 * l1m
                + weights.lambda_giou * gm,
        },
        assignment,
        d_prob,
        d_boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_spot_value() {
        let v = focal_loss(0.5, FocalParams::default());
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn unit_square_offset_half() {
        let (iou, giou) = iou_giou([0.5, 0.5, 1.0, 1.0], [1.0, 0.5, 1.0, 1.0]).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        // hull 1.5 x 1 = union, so no penalty
        assert!((giou - iou).abs() < 1e-15);
        let (iou, giou) = iou_giou([0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1]).unwrap();
        assert_eq!(iou, 0.0);
        assert!(giou < 0.0);
        assert!(iou_giou([0.1, 0.1, 0.0, 0.1], [0.9, 0.9, 0.1, 0.1]).is_err());
    }

    #[test]
    fn two_by_two_assignment() {
        let m = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!(hungarian_match(&[]).is_err());
    }

    #[test]
    fn rectangular_assignment_both_orientations() {
        let wide = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian_match(&wide).unwrap().pairs, vec![(0, 1)]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian_match(&tall).unwrap().pairs, vec![(1, 0)]);
    }

    #[test]
    fn empty_targets_is_background_only() {
        let preds = Detections {
            boxes: vec![[0.5; 4]; 3],
            class_prob: vec![0.2, 0.4, 0.6],
        };
        let f = FocalParams::default();
        let l = set_loss(&preds, &[], f, CostWeights::default()).unwrap();
        let expect: f64 = preds
            .class_prob
            .iter()
            .map(|&p| background_focal_loss(p, f))
            .sum::<f64>()
            / 3.0;
        assert!((l.breakdown.class - expect).abs() < 1e-15);
        assert_eq!(l.breakdown.l1, 0.0);
        assert!(l.assignment.pairs.is_empty());
    }

    #[test]
    fn too_many_targets() {
        let preds = Detections {
            boxes: vec![[0.5; 4]],
            class_prob: vec![0.5],
        };
        assert!(matches!(
            set_loss(
                &preds,
                &[[0.5; 4], [0.2; 4]],
                FocalParams::default(),
                CostWeights::default()
            ),
            Err(LossError::TooManyTargets { .. })
        ));
    }
}
