// SPDX-License-Identifier: Apache-2.0

//! Run report types and their published JSON schema.

use std::collections::BTreeMap;

use seed_head::bev::Georef;
use seed_head::boxgeom::Box3D;
use seed_head::matcher::{Assignment, DqsLosses};
use serde::{Deserialize, Serialize};

/// JSON schema every `report.json` validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of ground truths whose center cell is among the coarse queries.
    pub dqs_recall: f64,
    /// Fraction of ground truths whose nearest fine box center lies inside them.
    pub fine_recall: f64,
    /// Mean matched cost of the final detections per ground truth; null without ground truths.
    pub matched_cost_mean: Option<f64>,
    pub n_c: usize,
    pub n_f_effective: usize,
    pub num_gts: usize,
    /// Wall-clock per stage. The only nondeterministic part of a report.
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub s_c: f64,
    pub s_l: f64,
    pub s_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignments {
    /// DQS proposals against ground truth, used for the loss values.
    pub dqs: Assignment,
    #[serde(rename = "final")]
    pub final_layer: Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub georef: Georef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub layers: usize,
    pub queries: usize,
    pub heads: usize,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub metrics: MetricsReport,
    pub losses: DqsLosses,
    pub assignment: Assignments,
    pub detections: Vec<Detection>,
    pub map: MapMeta,
    pub attention: AttentionMeta,
}

impl RunReport {
    /// Copy with the timing table emptied, for determinism comparisons.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.metrics.timings_ms.clear();
        r
    }
}
