//! One-to-one label assignment and the training objective.
//!
//! Each ground-truth cell `j` is assigned to a distinct candidate `i`
//! minimizing the summed cost
//!
//! ```text
//! cost[j][i] = tau * |point_i - gt_j| - prob_i(class_j)
//! ```
//!
//! Matched candidates are trained toward their cell's class and position,
//! every other candidate toward background.

use serde::{Deserialize, Serialize};

use crate::data::Cell;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::ModelOutput;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Pixel-distance weight in the matching cost.
    pub tau: f64,
    /// Weight of the localization term in the total loss.
    pub lambda_loc: f64,
    /// Cross-entropy weight of candidates targeting background.
    pub bg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            lambda_loc: 2e-4,
            bg_weight: 0.5,
        }
    }
}

/// `N_gt x M` matching costs with their two components kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major total cost.
    pub values: Vec<f64>,
    /// Euclidean distance in pixels.
    pub location: Vec<f64>,
    /// Probability of the ground truth's class.
    pub class_prob: Vec<f64>,
}

impl CostMatrix {
    /// Wraps raw costs (components left empty).
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        CostMatrix {
            rows,
            cols,
            values,
            location: Vec::new(),
            class_prob: Vec::new(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(gt_index, proposal_index)` ordered by ground truth.
    pub matched: Vec<(usize, usize)>,
    /// Proposals with no ground truth, ascending.
    pub unmatched_proposals: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.matched.iter().map(|&(r, c)| cost.at(r, c)).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    /// Mean squared distance over matched pairs, pixels squared.
    pub loc_loss: f64,
    pub total: f64,
}

/// Loss value and its gradient with respect to the candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub breakdown: LossBreakdown,
    pub d_logits: Tensor,
    /// `(M, 2)`.
    pub d_points: Tensor,
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, c) = logits.dims2();
    let mut out = Vec::with_capacity(m * c);
    for i in 0..m {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - mx).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Tensor::from_vec(&[m, c], out)
}

pub fn build_cost_matrix(points: &[Point], class_probs: &Tensor, gts: &[Cell], tau: f64) -> Result<CostMatrix> {
    let (m, c) = class_probs.dims2();
    if m != points.len() {
        return Err(Error::invalid(format!(
            "{} points but {m} probability rows",
            points.len()
        )));
    }
    if gts.len() > m {
        return Err(Error::invalid(format!(
            "{} ground-truth cells exceed {m} proposals; use a denser proposal grid (smaller interval)",
            gts.len()
        )));
    }
    let n = gts.len();
    let mut values = Vec::with_capacity(n * m);
    let mut location = Vec::with_capacity(n * m);
    let mut class_prob = Vec::with_capacity(n * m);
    for g in gts {
        if g.class >= c - 1 {
            return Err(Error::invalid(format!(
                "ground-truth class {} out of range for {} classes",
                g.class,
                c - 1
            )));
        }
        let gp = g.point();
        for (i, p) in points.iter().enumerate() {
            let d = p.dist(&gp);
            let pr = class_probs.get2(i, g.class);
            location.push(d);
            class_prob.push(pr);
            values.push(tau * d - pr);
        }
    }
    Ok(CostMatrix {
        rows: n,
        cols: m,
        values,
        location,
        class_prob,
    })
}

/// Minimum-cost assignment of every row to a distinct column
/// (shortest augmenting paths with row/column potentials, `O(n^2 m)`).
///
/// Among equal reduced costs the lowest column index wins, which makes the
/// result deterministic.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::invalid(format!(
            "cannot assign {n} ground truths to {m} proposals one-to-one"
        )));
    }
    if let Some(bad) = cost.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("cost matrix contains non-finite entry {bad}")));
    }
    // 1-based: column 0 and row 0 are the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut matched: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    matched.sort_unstable();
    let unmatched_proposals = (1..=m).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(Assignment {
        matched,
        unmatched_proposals,
    })
}

fn validate_assignment(assignment: &Assignment, n_gt: usize, m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    let mut gt_seen = vec![false; n_gt];
    for &(j, i) in &assignment.matched {
        if j >= n_gt || i >= m {
            return Err(Error::invalid(format!(
                "assignment pair ({j}, {i}) out of range for {n_gt} cells and {m} proposals"
            )));
        }
        if seen[i] || gt_seen[j] {
            return Err(Error::invalid("assignment is not one-to-one"));
        }
        seen[i] = true;
        gt_seen[j] = true;
    }
    Ok(())
}

/// Weighted cross-entropy over all candidates plus the matched squared
/// distance, with gradients with respect to logits and points.
///
/// The cross-entropy is normalized by the summed weights, so uniform logits
/// give `ln(C + 1)` regardless of the background weight.
pub fn compute_loss(
    points: &[Point],
    logits: &Tensor,
    gts: &[Cell],
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    let (m, c) = logits.dims2();
    if points.len() != m {
        return Err(Error::invalid(format!("{} points but {m} logit rows", points.len())));
    }
    validate_assignment(assignment, gts.len(), m)?;
    let background = c - 1;
    let mut target = vec![background; m];
    let mut weight = vec![cfg.bg_weight; m];
    for &(j, i) in &assignment.matched {
        target[i] = gts[j].class;
        weight[i] = 1.0;
    }
    let wsum: f64 = weight.iter().sum();
    let probs = softmax_rows(logits);
    let mut d_logits = vec![0.0; m * c];
    let mut cls = 0.0;
    for i in 0..m {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        cls += weight[i] * (lse - row[target[i]]);
        let scale = if wsum > 0.0 { weight[i] / wsum } else { 0.0 };
        for k in 0..c {
            let onehot = if k == target[i] { 1.0 } else { 0.0 };
            d_logits[i * c + k] = scale * (probs.get2(i, k) - onehot);
        }
    }
    let cls_loss = if wsum > 0.0 { cls / wsum } else { 0.0 };

    let mut d_points = vec![0.0; m * 2];
    let n = assignment.matched.len();
    let mut loc = 0.0;
    for &(j, i) in &assignment.matched {
        let g = gts[j].point();
        let (dx, dy) = (points[i].x - g.x, points[i].y - g.y);
        loc += dx * dx + dy * dy;
        d_points[2 * i] = cfg.lambda_loc * 2.0 * dx / n as f64;
        d_points[2 * i + 1] = cfg.lambda_loc * 2.0 * dy / n as f64;
    }
    let loc_loss = if n > 0 { loc / n as f64 } else { 0.0 };
    Ok(LossGrad {
        breakdown: LossBreakdown {
            cls_loss,
            loc_loss,
            total: cls_loss + cfg.lambda_loc * loc_loss,
        },
        d_logits: Tensor::from_vec(&[m, c], d_logits),
        d_points: Tensor::from_vec(&[m, 2], d_points),
    })
}

/// Matches `gts` against a model output's candidates and evaluates the loss.
pub fn match_and_loss(output: &ModelOutput, gts: &[Cell], cfg: &LossConfig) -> Result<(Assignment, LossGrad)> {
    let probs = softmax_rows(&output.candidate_logits);
    let cost = build_cost_matrix(&output.candidate_points, &probs, gts, cfg.tau)?;
    let assignment = hungarian_match(&cost)?;
    let loss = compute_loss(&output.candidate_points, &output.candidate_logits, gts, &assignment, cfg)?;
    Ok((assignment, loss))
}
