// SPDX-License-Identifier: Apache-2.0

//! Dual query selection: mask scoring, foreground (coarse) selection, quality
//! fusion, quality (fine) selection and geometric query embedding.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::bev::BevFeatureMap;
use crate::boxgeom::{Box3D, SceneExtent};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Mlp};
use crate::params::ParamStore;

/// Where a query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    /// Flat BEV cell index `row · W + col`.
    Cell(usize),
    Synthetic,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryScores {
    /// Mask-predictor score of the source cell.
    pub foreground: Option<Vec<f64>>,
    pub classification: Option<Vec<f64>>,
    pub localization: Option<Vec<f64>>,
    pub quality: Option<Vec<f64>>,
    pub fused: Option<Vec<f64>>,
}

impl QueryScores {
    fn each(&self) -> [(&'static str, Option<&Vec<f64>>); 5] {
        [
            ("foreground scores", self.foreground.as_ref()),
            ("classification scores", self.classification.as_ref()),
            ("localization scores", self.localization.as_ref()),
            ("quality scores", self.quality.as_ref()),
            ("fused scores", self.fused.as_ref()),
        ]
    }

    fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Option<Vec<f64>>| v.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect());
        QueryScores {
            foreground: pick(&self.foreground),
            classification: pick(&self.classification),
            localization: pick(&self.localization),
            quality: pick(&self.quality),
            fused: pick(&self.fused),
        }
    }
}

/// Ordered set of query features with their provenance, boxes and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub features: Array2<f64>,
    pub sources: Vec<QuerySource>,
    pub boxes: Option<Vec<Box3D>>,
    pub scores: QueryScores,
}

impl QuerySet {
    pub fn new(features: Array2<f64>, sources: Vec<QuerySource>) -> Result<Self> {
        let set = QuerySet {
            features,
            sources,
            boxes: None,
            scores: QueryScores::default(),
        };
        set.validate()?;
        Ok(set)
    }

    /// One query per BEV cell, in flat index order.
    pub fn from_map(map: &BevFeatureMap) -> Self {
        let features = Array2::from_shape_vec((map.cells(), map.channels()), map.data().to_vec())
            .expect("map data length is H·W·C");
        QuerySet {
            features,
            sources: (0..map.cells()).map(QuerySource::Cell).collect(),
            boxes: None,
            scores: QueryScores::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.sources.len() != n {
            return Err(Error::shape("query sources", n, self.sources.len()));
        }
        if let Some(b) = &self.boxes {
            if b.len() != n {
                return Err(Error::shape("query boxes", n, b.len()));
            }
        }
        for (what, scores) in self.scores.each() {
            if let Some(s) = scores {
                if s.len() != n {
                    return Err(Error::shape(what, n, s.len()));
                }
                if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidArgument(format!("{what} must lie in [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn boxes_required(&self) -> Result<&[Box3D]> {
        self.boxes.as_deref().ok_or(Error::Missing("boxes"))
    }

    /// Rows at `indices`, in that order, with everything attached.
    pub fn select(&self, indices: &[usize]) -> QuerySet {
        QuerySet {
            features: self.features.select(Axis(0), indices),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
            boxes: self
                .boxes
                .as_ref()
                .map(|b| indices.iter().map(|&i| b[i]).collect()),
            scores: self.scores.select(indices),
        }
    }
}

/// Per-cell `C → hidden → 1` perceptron with sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPredictorParams {
    pub mlp: Mlp,
}

impl MaskPredictorParams {
    pub fn from_store(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(MaskPredictorParams {
            mlp: Mlp::from_store(store, prefix, channels, hidden, 1)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqsConfig {
    /// Foreground proportion in (0, 1].
    pub r: f64,
    /// Fine query count.
    pub n_f: usize,
    /// Classification threshold in [0, 1).
    pub tau: f64,
    /// Localization exponent in (0, 1).
    pub beta: f64,
}

impl Default for DqsConfig {
    fn default() -> Self {
        DqsConfig {
            r: 0.3,
            n_f: 1000,
            tau: 0.2,
            beta: 0.68,
        }
    }
}

impl DqsConfig {
    /// Returns `(field, message)` for the first violated range.
    pub fn violation(&self) -> Option<(&'static str, String)> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Some(("r", format!("must be in (0, 1], got {}", self.r)));
        }
        if self.n_f == 0 {
            return Some(("n_f", "must be >= 1".into()));
        }
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return Some(("tau", format!("must be in [0, 1), got {}", self.tau)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Some(("beta", format!("must be in (0, 1), got {}", self.beta)));
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        match self.violation() {
            Some((field, msg)) => Err(Error::InvalidArgument(format!("dqs.{field} {msg}"))),
            None => Ok(()),
        }
    }
}

/// `S_bev` for every cell of `map`, flat index order.
pub fn mask_scores(map: &BevFeatureMap, params: &MaskPredictorParams) -> Result<Vec<f64>> {
    let features = ArrayView2::from_shape((map.cells(), map.channels()), map.data())
        .expect("map data length is H·W·C");
    if params.mlp.output_dim() != 1 {
        return Err(Error::shape("mask predictor output", 1, params.mlp.output_dim()));
    }
    let logits = params.mlp.forward(features)?;
    Ok(logits.column(0).iter().map(|&v| sigmoid(v)).collect())
}

/// `N_c = max(1, ⌊cells · r⌋)`.
///
/// A 1e-9 slack absorbs products such as `0.29 · 100 = 28.999…` that should be integral.
pub fn coarse_count(cells: usize, r: f64) -> usize {
    ((cells as f64 * r + 1e-9).floor() as usize).clamp(1, cells.max(1))
}

fn tie_key(set: &QuerySet, i: usize) -> usize {
    match set.sources[i] {
        QuerySource::Cell(c) => c,
        QuerySource::Synthetic => i,
    }
}

/// Indices of the `count` largest scores; ties go to the smaller `key`.
fn top_indices(scores: &[f64], count: usize, key: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| key(*a).cmp(&key(*b)))
    };
    let count = count.min(order.len());
    if count < order.len() {
        order.select_nth_unstable_by(count, cmp);
        order.truncate(count);
    }
    order.sort_unstable_by(cmp);
    order
}

/// Keeps the `N_c` queries with the highest mask scores.
///
/// Ties are broken by the lower source cell index, so the result does not
/// depend on the order of the input rows.
pub fn foreground_select(flattened: &QuerySet, s_bev: &[f64], r: f64) -> Result<QuerySet> {
    if flattened.is_empty() {
        return Err(Error::InvalidArgument("no queries to select from".into()));
    }
    if s_bev.len() != flattened.len() {
        return Err(Error::shape("mask scores", flattened.len(), s_bev.len()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("r must be in (0, 1], got {r}")));
    }
    if s_bev.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("mask scores must be finite".into()));
    }
    let n_c = coarse_count(flattened.len(), r);
    let picked = top_indices(s_bev, n_c, |i| tie_key(flattened, i));
    let mut out = flattened.select(&picked);
    out.scores.foreground = Some(picked.iter().map(|&i| s_bev[i]).collect());
    Ok(out)
}

/// Fuses classification and localization scores:
/// `s_c^(1−β) · s_l^β` when `s_c > τ`, otherwise `s_c`.
pub fn quality_score(s_c: f64, s_l: f64, beta: f64, tau: f64) -> f64 {
    if s_c > tau {
        (s_c.powf(1.0 - beta) * s_l.powf(beta)).clamp(0.0, 1.0)
    } else {
        s_c
    }
}

/// Attaches `S_q` computed from the set's classification and localization scores.
pub fn attach_quality(set: &mut QuerySet, beta: f64, tau: f64) -> Result<()> {
    let s_c = set
        .scores
        .classification
        .as_ref()
        .ok_or(Error::Missing("classification scores"))?;
    let s_l = set
        .scores
        .localization
        .as_ref()
        .ok_or(Error::Missing("localization scores"))?;
    let s_q = s_c
        .iter()
        .zip(s_l)
        .map(|(&c, &l)| quality_score(c, l, beta, tau))
        .collect();
    set.scores.quality = Some(s_q);
    Ok(())
}

/// Top-`n_f` candidates by `S_q` (ties to the lower candidate index); the fused
/// score `S_f` of each survivor is its `S_q`.
pub fn quality_select(candidates: &QuerySet, n_f: usize) -> Result<QuerySet> {
    candidates.boxes_required()?;
    let s_q = candidates
        .scores
        .quality
        .as_ref()
        .ok_or(Error::Missing("quality scores"))?;
    if s_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("quality scores must be finite".into()));
    }
    let picked = top_indices(s_q, n_f, |i| i);
    let mut out = candidates.select(&picked);
    out.scores.fused = out.scores.quality.clone();
    Ok(out)
}

/// Width of the query-embedding input: 8 box terms plus the fused score.
pub const QUERY_EMBED_INPUT: usize = 9;

/// `[encode(box) ‖ S_f]` per row.
pub fn query_embedding_inputs(boxes: &[Box3D], scores: &[f64], extent: &SceneExtent) -> Result<Array2<f64>> {
    if boxes.len() != scores.len() {
        return Err(Error::shape("fused scores", boxes.len(), scores.len()));
    }
    let mut input = Array2::zeros((boxes.len(), QUERY_EMBED_INPUT));
    for (i, (b, s)) in boxes.iter().zip(scores).enumerate() {
        let mut row = input.row_mut(i);
        for (k, v) in b.encode(extent).into_iter().enumerate() {
            row[k] = v;
        }
        row[8] = *s;
    }
    Ok(input)
}

/// Geometric-aware queries `Q_f = MLP([encode(B_f) ‖ S_f])`.
pub fn embed_quality_queries(
    boxes: &[Box3D],
    scores: &[f64],
    mlp: &Mlp,
    extent: &SceneExtent,
) -> Result<Array2<f64>> {
    if mlp.input_dim() != QUERY_EMBED_INPUT {
        return Err(Error::shape("query embedding input", QUERY_EMBED_INPUT, mlp.input_dim()));
    }
    let input = query_embedding_inputs(boxes, scores, extent)?;
    mlp.forward(input.view())
}
