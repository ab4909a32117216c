// SPDX-License-Identifier: Apache-2.0

//! Quality-aware bipartite matching between queries and ground truths.
//!
//! The classification cost is the focal-style difference of positive and
//! negative terms evaluated on the fused quality score; regression and GIoU
//! costs compare each query box with each ground truth.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{giou_bev, iou_3d, Box3D, SceneExtent};
use crate::dqs::QuerySet;
use crate::error::{Error, Result};

/// Scores are clamped to `[SCORE_CLAMP, 1 − SCORE_CLAMP]` before any logarithm.
pub const SCORE_CLAMP: f64 = 1e-7;
/// Two assignment costs within this (relative to `max(1, |cost|)`) count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;
pub const BRUTE_FORCE_MAX_GTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            alpha: 0.25,
            gamma: 2.0,
            lambda_cls: 1.0,
            lambda_reg: 2.0,
            lambda_giou: 4.0,
        }
    }
}

impl CostWeights {
    pub fn violation(&self) -> Option<(&'static str, String)> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Some(("alpha", format!("must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Some(("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("lambda_giou", self.lambda_giou),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Some((name, format!("must be >= 0, got {v}")));
            }
        }
        None
    }

    /// All three λ multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        CostWeights {
            lambda_cls: self.lambda_cls * c,
            lambda_reg: self.lambda_reg * c,
            lambda_giou: self.lambda_giou * c,
            ..*self
        }
    }
}

pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// `(C_pos, C_neg)` for a fused score.
pub fn focal_terms(s_f: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let s = clamp_score(s_f);
    let pos = -(1.0 - alpha) * s.powf(gamma) * (1.0 - s).ln();
    let neg = -alpha * (1.0 - s).powf(gamma) * s.ln();
    (pos, neg)
}

/// `C_cls = C_pos − C_neg`.
pub fn cls_cost(s_f: f64, weights: &CostWeights) -> f64 {
    let (pos, neg) = focal_terms(s_f, weights.alpha, weights.gamma);
    pos - neg
}

/// L1 distance between extent-normalized 8-vector encodings.
pub fn reg_cost(pred: &Box3D, gt: &Box3D, extent: &SceneExtent) -> f64 {
    pred.encode(extent)
        .iter()
        .zip(gt.encode(extent))
        .map(|(a, b)| (a - b).abs())
        .sum()
}

pub fn giou_cost(pred: &Box3D, gt: &Box3D) -> f64 {
    -giou_bev(pred, gt)
}

/// `N × G` matching costs `λ_cls·C_cls + λ_reg·C_reg + λ_giou·C_giou`.
pub fn cost_matrix_from_parts(
    boxes: &[Box3D],
    fused: &[f64],
    gts: &[Box3D],
    weights: &CostWeights,
    extent: &SceneExtent,
) -> Result<Array2<f64>> {
    if boxes.is_empty() || gts.is_empty() {
        return Err(Error::InvalidArgument(
            "cost matrix needs at least one query and one ground truth".into(),
        ));
    }
    if fused.len() != boxes.len() {
        return Err(Error::shape("fused scores", boxes.len(), fused.len()));
    }
    let rows: Vec<Vec<f64>> = boxes
        .par_iter()
        .zip(fused.par_iter())
        .map(|(b, &s)| {
            let cls = weights.lambda_cls * cls_cost(s, weights);
            gts.iter()
                .map(|g| cls + weights.lambda_reg * reg_cost(b, g, extent) + weights.lambda_giou * giou_cost(b, g))
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((boxes.len(), gts.len()), flat).expect("rows have G entries"))
}

/// Cost matrix for a query set carrying boxes and fused scores.
pub fn cost_matrix(preds: &QuerySet, gts: &[Box3D], weights: &CostWeights, extent: &SceneExtent) -> Result<Array2<f64>> {
    let boxes = preds.boxes_required()?;
    let fused = preds.scores.fused.as_ref().ok_or(Error::Missing("fused scores"))?;
    cost_matrix_from_parts(boxes, fused, gts, weights, extent)
}

/// Query↔ground-truth pairing. `pairs[g] = (query, g)`, listed by ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_columns(cost: ArrayView2<f64>, query_of_gt: &[usize]) -> Self {
        let pairs: Vec<(usize, usize)> = query_of_gt.iter().enumerate().map(|(g, &q)| (q, g)).collect();
        Assignment {
            total_cost: assignment_cost(cost, &pairs),
            pairs,
        }
    }

    /// `matched[q]` is the ground truth assigned to query `q`, if any.
    pub fn query_targets(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for &(q, g) in &self.pairs {
            if q < queries {
                out[q] = Some(g);
            }
        }
        out
    }
}

/// Sum of `cost[q, g]` over pairs, accumulated in list order.
pub fn assignment_cost(cost: ArrayView2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(q, g)| cost[[q, g]]).sum()
}

fn tied(a: f64, b: f64) -> bool {
    a <= b + TIE_TOLERANCE * b.abs().max(1.0)
}

fn check_matrix(cost: ArrayView2<f64>) -> Result<()> {
    let (n, g) = cost.dim();
    if g > n {
        return Err(Error::TooManyGroundTruths { queries: n, gts: g });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix entries must be finite".into()));
    }
    Ok(())
}

/// Shortest-augmenting-path Hungarian method on a `rows × cols` matrix with
/// `rows ≤ cols`; returns the column given to each row.
fn min_cost_rows(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut col_of_row = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            col_of_row[owner[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Best completion for ground truths `first..G` using queries not in `taken`.
/// Returns the queries in ground-truth order and the completion cost.
fn best_completion(cost: ArrayView2<f64>, first: usize, taken: &[bool]) -> (Vec<usize>, f64) {
    let (_, g) = cost.dim();
    let free: Vec<usize> = (0..taken.len()).filter(|&q| !taken[q]).collect();
    let rows = g - first;
    if rows == 0 {
        return (Vec::new(), 0.0);
    }
    let cols = min_cost_rows(rows, free.len(), |r, c| cost[[free[c], first + r]]);
    let queries: Vec<usize> = cols.iter().map(|&c| free[c]).collect();
    let total = queries.iter().enumerate().map(|(r, &q)| cost[[q, first + r]]).sum();
    (queries, total)
}

/// Exact minimum-cost injection of ground truths (columns) into queries (rows).
///
/// Among assignments whose cost ties the optimum, the one with the
/// lexicographically smallest query sequence (in ground-truth order) is returned.
pub fn hungarian_solve(cost: ArrayView2<f64>) -> Result<Assignment> {
    check_matrix(cost)?;
    let (n, g) = cost.dim();
    if g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let mut sigma = min_cost_rows(g, n, |r, c| cost[[c, r]]);
    let optimum = Assignment::from_columns(cost, &sigma).total_cost;

    // Column minima give a cheap lower bound on any completion.
    let col_min: Vec<f64> = (0..g)
        .map(|gt| (0..n).map(|q| cost[[q, gt]]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut suffix_bound = vec![0.0; g + 1];
    for gt in (0..g).rev() {
        suffix_bound[gt] = suffix_bound[gt + 1] + col_min[gt];
    }

    let mut taken = vec![false; n];
    let mut prefix_cost = 0.0;
    for gt in 0..g {
        for q in 0..sigma[gt] {
            if taken[q] {
                continue;
            }
            let head = prefix_cost + cost[[q, gt]];
            if !tied(head + suffix_bound[gt + 1], optimum) {
                continue;
            }
            taken[q] = true;
            let (rest, rest_cost) = best_completion(cost, gt + 1, &taken);
            taken[q] = false;
            if tied(head + rest_cost, optimum) {
                sigma[gt] = q;
                sigma[gt + 1..].copy_from_slice(&rest);
                break;
            }
        }
        taken[sigma[gt]] = true;
        prefix_cost += cost[[sigma[gt], gt]];
    }
    Ok(Assignment::from_columns(cost, &sigma))
}

/// Matching that tolerates more ground truths than queries: when `G > N`
/// every query receives one ground truth and the remaining ones stay unmatched.
/// Pairs are listed in ground-truth order.
pub fn min_cost_matching(cost: ArrayView2<f64>) -> Result<Assignment> {
    let (n, g) = cost.dim();
    if g <= n {
        return hungarian_solve(cost);
    }
    let flipped = hungarian_solve(cost.t())?;
    let mut pairs: Vec<(usize, usize)> = flipped.pairs.iter().map(|&(g, q)| (q, g)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(Assignment {
        total_cost: assignment_cost(cost, &pairs),
        pairs,
    })
}

/// Exhaustive search over all injections; the verification oracle for
/// [`hungarian_solve`], with the same tie rule.
pub fn brute_force_assignment(cost: ArrayView2<f64>) -> Result<Assignment> {
    check_matrix(cost)?;
    let (n, g) = cost.dim();
    if g > BRUTE_FORCE_MAX_GTS {
        return Err(Error::OracleTooLarge(g));
    }

    fn visit(
        cost: ArrayView2<f64>,
        gt: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        each: &mut dyn FnMut(&[usize]) -> bool,
    ) -> bool {
        if gt == cost.ncols() {
            return each(current);
        }
        for q in 0..cost.nrows() {
            if used[q] {
                continue;
            }
            used[q] = true;
            current.push(q);
            let stop = visit(cost, gt + 1, used, current, each);
            current.pop();
            used[q] = false;
            if stop {
                return true;
            }
        }
        false
    }

    let total = |sigma: &[usize]| -> f64 { sigma.iter().enumerate().map(|(gt, &q)| cost[[q, gt]]).sum() };

    let mut best = f64::INFINITY;
    visit(cost, 0, &mut vec![false; n], &mut Vec::with_capacity(g), &mut |s| {
        best = best.min(total(s));
        false
    });
    let mut chosen = Vec::new();
    visit(cost, 0, &mut vec![false; n], &mut Vec::with_capacity(g), &mut |s| {
        if tied(total(s), best) {
            chosen = s.to_vec();
            true
        } else {
            false
        }
    });
    Ok(Assignment::from_columns(cost, &chosen))
}

/// Supervision values for the coarse-proposal heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqsLosses {
    /// Mean BCE of `S_c` against matched (1) / unmatched (0) targets.
    pub bce_cls: f64,
    /// Mean `|S_l − IoU3D(box, gt)|` over matched pairs.
    pub loc_l1: f64,
    /// Mean (over matched pairs) Smooth-L1 (δ = 1) summed over the 8-vector encoding.
    pub box_smooth_l1: f64,
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

pub fn dqs_loss_values(
    proposals: &QuerySet,
    gts: &[Box3D],
    assignment: &Assignment,
    extent: &SceneExtent,
) -> Result<DqsLosses> {
    let n = proposals.len();
    if n == 0 {
        return Err(Error::InvalidArgument("loss over an empty proposal set".into()));
    }
    let boxes = proposals.boxes_required()?;
    let s_c = proposals
        .scores
        .classification
        .as_ref()
        .ok_or(Error::Missing("classification scores"))?;
    let s_l = proposals
        .scores
        .localization
        .as_ref()
        .ok_or(Error::Missing("localization scores"))?;
    for &(q, g) in &assignment.pairs {
        if q >= n || g >= gts.len() {
            return Err(Error::InvalidArgument(format!("pair ({q}, {g}) out of range")));
        }
    }

    let targets = assignment.query_targets(n);
    let bce_cls = s_c
        .iter()
        .zip(&targets)
        .map(|(&s, t)| {
            let s = clamp_score(s);
            if t.is_some() {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum::<f64>()
        / n as f64;

    let matched = assignment.pairs.len();
    if matched == 0 {
        return Ok(DqsLosses {
            bce_cls,
            loc_l1: 0.0,
            box_smooth_l1: 0.0,
        });
    }
    let mut loc = 0.0;
    let mut reg = 0.0;
    for &(q, g) in &assignment.pairs {
        loc += (s_l[q] - iou_3d(&boxes[q], &gts[g])).abs();
        reg += boxes[q]
            .encode(extent)
            .iter()
            .zip(gts[g].encode(extent))
            .map(|(a, b)| smooth_l1(a - b))
            .sum::<f64>();
    }
    Ok(DqsLosses {
        bce_cls,
        loc_l1: loc / matched as f64,
        box_smooth_l1: reg / matched as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqs::QuerySource;
    use ndarray::array;
    use std::f64::consts::{LN_2, PI};

    #[test]
    fn focal_spot_values() {
        // exact forms at s = 0.5: C_pos = 0.1875·ln2, C_neg = 0.0625·ln2
        let w = CostWeights::default();
        let (pos, neg) = focal_terms(0.5, w.alpha, w.gamma);
        assert!((pos - 0.129_965_096_354_990).abs() < 1e-6);
        assert!((neg - 0.043_321_698_784_997).abs() < 1e-6);
        assert!((cls_cost(0.5, &w) - 0.086_643_397_569_993).abs() < 1e-6);
        assert!((pos - 0.1875 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn focal_collapse_is_antisymmetric() {
        let w = CostWeights {
            alpha: 0.5,
            gamma: 0.0,
            ..Default::default()
        };
        for s in [0.1, 0.3, 0.45, 0.7] {
            let c = cls_cost(s, &w);
            assert!((c - 0.5 * (s.ln() - (1.0 - s).ln())).abs() < 1e-12);
            assert!((c + cls_cost(1.0 - s, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_monotone_sweep() {
        let w = CostWeights::default();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..1000 {
            let s = SCORE_CLAMP + (1.0 - 2.0 * SCORE_CLAMP) * i as f64 / 999.0;
            let c = cls_cost(s, &w);
            assert!(c > prev, "not increasing at {s}");
            assert!(c.is_finite());
            prev = c;
        }
    }

    #[test]
    fn reg_and_giou_costs() {
        let ext = SceneExtent::new(100.0, 100.0, 10.0).unwrap();
        let a = Box3D::new(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.4).unwrap();
        assert_eq!(reg_cost(&a, &a, &ext), 0.0);
        let shifted = Box3D::new(4.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.4).unwrap();
        assert!((reg_cost(&a, &shifted, &ext) - 0.03).abs() < 1e-15);
        let aliased = Box3D::new(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.4 + 2.0 * PI).unwrap();
        assert!(reg_cost(&a, &aliased, &ext) < 1e-12);

        // a rotated footprint leaves dead area inside its axis-aligned enclosure
        assert!(giou_cost(&a, &a) > -1.0);
        let upright = Box3D::new(1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap();
        assert!((giou_cost(&upright, &upright) + 1.0).abs() < 1e-12);
        let u0 = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let u3 = Box3D::new(3.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert!((giou_cost(&u0, &u3) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn giou_only_matrix() {
        let ext = SceneExtent::new(10.0, 10.0, 4.0).unwrap();
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0).unwrap();
        let w = CostWeights {
            lambda_cls: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let m = cost_matrix_from_parts(&[b, b, b], &[0.1, 0.5, 0.9], &[b, b], &w, &ext).unwrap();
        assert!(m.iter().all(|v| (v + 4.0).abs() < 1e-12));
        assert!(cost_matrix_from_parts(&[b], &[0.5], &[], &w, &ext).is_err());
    }

    #[test]
    fn solver_small_cases() {
        let a = hungarian_solve(array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);

        let one = hungarian_solve(array![[2.5]].view()).unwrap();
        assert_eq!(one.pairs, vec![(0, 0)]);
        assert_eq!(one.total_cost, 2.5);

        let column = array![[3.0], [1.0], [2.0], [1.0]];
        assert_eq!(hungarian_solve(column.view()).unwrap().pairs, vec![(1, 0)]);
        assert_eq!(brute_force_assignment(column.view()).unwrap().pairs, vec![(1, 0)]);

        assert!(matches!(
            hungarian_solve(array![[1.0, 2.0]].view()),
            Err(Error::TooManyGroundTruths { .. })
        ));
        assert!(hungarian_solve(array![[f64::NAN]].view()).is_err());
        assert!(brute_force_assignment(Array2::zeros((9, 9)).view()).is_err());
    }

    #[test]
    fn surplus_ground_truths_leave_some_unmatched() {
        let cost = array![[5.0, 1.0, 3.0], [0.5, 4.0, 2.0]];
        let a = min_cost_matching(cost.view()).unwrap();
        assert_eq!(a.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(a.total_cost, 1.5);
        assert_eq!(min_cost_matching(cost.t()).unwrap(), hungarian_solve(cost.t()).unwrap());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let flat = Array2::from_elem((4, 3), 1.0);
        let h = hungarian_solve(flat.view()).unwrap();
        assert_eq!(h.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(h, brute_force_assignment(flat.view()).unwrap());

        let m = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        // optimum 0 reachable as (1,0),(0,1) / (1,0),(2,1) / (2,0),(0,1)
        let h = hungarian_solve(m.view()).unwrap();
        assert_eq!(h.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(h, brute_force_assignment(m.view()).unwrap());
    }

    #[test]
    fn identity_optimal_matrix() {
        let m = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 0.0 } else { 1.0 + (i * j) as f64 });
        let expected: Vec<(usize, usize)> = (0..5).map(|i| (i, i)).collect();
        assert_eq!(brute_force_assignment(m.view()).unwrap().pairs, expected);
        assert_eq!(hungarian_solve(m.view()).unwrap().pairs, expected);
    }

    fn proposals() -> (QuerySet, Vec<Box3D>) {
        let gts = vec![
            Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap(),
            Box3D::new(10.0, 5.0, 0.0, 4.0, 2.0, 1.5, 1.0).unwrap(),
        ];
        let mut set = QuerySet::new(Array2::zeros((3, 4)), vec![QuerySource::Synthetic; 3]).unwrap();
        set.boxes = Some(vec![gts[0], Box3D::new(-5.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap(), gts[1]]);
        set.scores.classification = Some(vec![1.0, 0.0, 1.0]);
        set.scores.localization = Some(vec![1.0, 0.3, 1.0]);
        (set, gts)
    }

    #[test]
    fn perfect_predictions_have_tiny_losses() {
        let ext = SceneExtent::new(50.0, 50.0, 5.0).unwrap();
        let (set, gts) = proposals();
        let assignment = Assignment {
            pairs: vec![(0, 0), (2, 1)],
            total_cost: 0.0,
        };
        let l = dqs_loss_values(&set, &gts, &assignment, &ext).unwrap();
        assert!(l.bce_cls <= 1e-6 && l.loc_l1 <= 1e-6 && l.box_smooth_l1 <= 1e-6, "{l:?}");
    }

    #[test]
    fn loss_spot_values() {
        let ext = SceneExtent::new(50.0, 50.0, 5.0).unwrap();
        let (mut set, gts) = proposals();
        set.scores.classification = Some(vec![0.5; 3]);
        let none = Assignment {
            pairs: vec![],
            total_cost: 0.0,
        };
        let l = dqs_loss_values(&set, &gts, &none, &ext).unwrap();
        assert!((l.bce_cls - LN_2).abs() < 1e-12);
        assert_eq!(l.loc_l1, 0.0);

        // one matched pair with S_l = 0.3 against a box of true IoU 0.8
        let gt = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        // same footprint, shifted up by 1/9: (1 − dz)/(1 + dz) = 0.8
        let pred = Box3D::new(0.0, 0.0, 1.0 / 9.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let iou = iou_3d(&pred, &gt);
        assert!((iou - 0.8).abs() < 1e-12, "{iou}");
        let mut single = QuerySet::new(Array2::zeros((1, 2)), vec![QuerySource::Synthetic]).unwrap();
        single.boxes = Some(vec![pred]);
        single.scores.classification = Some(vec![0.5]);
        single.scores.localization = Some(vec![0.3]);
        let pair = Assignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        let l = dqs_loss_values(&single, &[gt], &pair, &ext).unwrap();
        assert!((l.loc_l1 - 0.5).abs() < 1e-12);

        let empty = QuerySet::new(Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(dqs_loss_values(&empty, &[gt], &none, &ext).is_err());
    }
}
