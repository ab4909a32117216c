// SPDX-License-Identifier: Apache-2.0

//! End-to-end head: mask scores, coarse selection, the DQS decoder layer,
//! quality selection, query embedding, the decoder stack and matching.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use seed_head::bev::{write_tensor, BevFeatureMap, FeatureCoord};
use seed_head::boxgeom::Box3D;
use seed_head::decoder::{decoder_forward, layer_forward, DecoderLayerParams, LayerShape};
use seed_head::dga::DgaTrace;
use seed_head::dqs::{
    attach_quality, embed_quality_queries, foreground_select, mask_scores, quality_select,
    MaskPredictorParams, QuerySet, QuerySource, QUERY_EMBED_INPUT,
};
use seed_head::matcher::{cost_matrix, dqs_loss_values, min_cost_matching, Assignment};
use seed_head::nn::Mlp;
use seed_head::params::ParamStore;

use crate::config::{MaskSource, RunConfig};
use crate::error::{HarnessError, Result};
use crate::json;
use crate::report::{AttentionMeta, Assignments, Detection, MapMeta, MetricsReport, RunReport, REPORT_FILE};
use crate::scene::Scene;

pub const POSITIONS_FILE: &str = "attn_positions.bevt";
pub const WEIGHTS_FILE: &str = "attn_weights.bevt";
pub const SCORES_FILE: &str = "s_bev.bevt";

/// Every learned tensor of the head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub mask: Option<MaskPredictorParams>,
    pub dqs_layer: DecoderLayerParams,
    pub query_embed: Mlp,
    pub layers: Vec<DecoderLayerParams>,
}

impl HeadParams {
    /// Tensor names: `mask.*`, `dqs_layer.*`, `query_embed.*` and `decoder.{i}.*`.
    pub fn from_store(store: &mut ParamStore, cfg: &RunConfig) -> Result<Self> {
        let c = cfg.channels();
        let shape = LayerShape {
            channels: c,
            heads: cfg.decoder.heads,
            grid: cfg.dga.k,
            dga_heads: cfg.dga.heads,
            ffn_hidden: cfg.ffn_hidden(),
        };
        let mask = match cfg.mask_scores {
            MaskSource::Predictor => Some(MaskPredictorParams::from_store(store, "mask", c, cfg.mlp_hidden())?),
            MaskSource::Oracle => None,
        };
        let dqs_layer = DecoderLayerParams::from_store(store, "dqs_layer", shape)?;
        let query_embed = Mlp::from_store(store, "query_embed", QUERY_EMBED_INPUT, cfg.mlp_hidden(), c)?;
        let layers = (0..cfg.decoder.layers)
            .map(|i| DecoderLayerParams::from_store(store, &format!("decoder.{i}"), shape))
            .collect::<seed_head::Result<Vec<_>>>()?;
        Ok(HeadParams {
            mask,
            dqs_layer,
            query_embed,
            layers,
        })
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Foreground scores that drove coarse selection.
    pub s_bev: Vec<f64>,
    /// Per decoder layer, per final query.
    pub attention: Vec<Vec<DgaTrace>>,
    pub fine: QuerySet,
    pub final_queries: QuerySet,
}

fn anchors(map: &BevFeatureMap, set: &QuerySet, cfg: &RunConfig) -> Result<Vec<Box3D>> {
    let a = cfg.anchor;
    set.sources
        .iter()
        .map(|s| {
            let cell = match s {
                QuerySource::Cell(c) => *c,
                QuerySource::Synthetic => unreachable!("coarse queries come from cells"),
            };
            let rc = FeatureCoord::new((cell / map.width()) as f64, (cell % map.width()) as f64);
            let (x, y) = map.feature_to_world(rc);
            Ok(Box3D::new(x, y, a.z, a.l, a.w, a.h, 0.0)?)
        })
        .collect()
}

fn inside_footprint(b: &Box3D, p: [f64; 2]) -> bool {
    let (s, c) = b.theta().sin_cos();
    let dx = p[0] - b.x();
    let dy = p[1] - b.y();
    (c * dx + s * dy).abs() <= 0.5 * b.l() && (-s * dx + c * dy).abs() <= 0.5 * b.w()
}

/// Share of ground truths whose center cell is a coarse query source; 1 when there are none.
pub fn dqs_recall(map: &BevFeatureMap, coarse: &QuerySet, gts: &[Box3D]) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let mut selected = vec![false; map.cells()];
    for s in &coarse.sources {
        if let QuerySource::Cell(c) = s {
            selected[*c] = true;
        }
    }
    let hit = gts
        .iter()
        .filter(|g| map.cell_index_at(g.x(), g.y()).is_some_and(|c| selected[c]))
        .count();
    hit as f64 / gts.len() as f64
}

/// Share of ground truths whose nearest box center (ties to the lower index) lies in their footprint.
pub fn fine_recall(boxes: &[Box3D], gts: &[Box3D]) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let hit = gts
        .iter()
        .filter(|g| {
            let nearest = boxes.iter().min_by(|a, b| {
                let da = (a.x() - g.x()).hypot(a.y() - g.y());
                let db = (b.x() - g.x()).hypot(b.y() - g.y());
                da.total_cmp(&db)
            });
            nearest.is_some_and(|b| inside_footprint(g, b.center_bev()))
        })
        .count();
    hit as f64 / gts.len() as f64
}

fn match_set(set: &QuerySet, gts: &[Box3D], cfg: &RunConfig) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let cost = cost_matrix(set, gts, &cfg.matching, &cfg.extent)?;
    Ok(min_cost_matching(cost.view())?)
}

struct Clock {
    timings: BTreeMap<String, f64>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Clock {
            timings: BTreeMap::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.last).as_secs_f64() * 1e3);
        self.last = now;
    }
}

fn check_scene(cfg: &RunConfig, scene: &Scene) -> Result<()> {
    let f = &scene.features;
    let m = &cfg.map;
    for (field, want, got) in [
        ("height", m.height, f.height()),
        ("width", m.width, f.width()),
        ("channels", m.channels, f.channels()),
    ] {
        if want != got {
            return Err(HarnessError::config(
                format!("/map/{field}"),
                format!("config says {want}, scene has {got}"),
            ));
        }
    }
    let g = f.georef();
    if (g.cell_size_x - m.cell_size).abs() > 1e-12 || (g.cell_size_y - m.cell_size).abs() > 1e-12 {
        return Err(HarnessError::config("/map/cell_size", "does not match the scene grid"));
    }
    if scene.oracle.len() != f.cells() {
        return Err(HarnessError::Validation("oracle scores do not cover the map".into()));
    }
    Ok(())
}

pub fn run_with_params(cfg: &RunConfig, scene: &Scene, params: &HeadParams) -> Result<RunOutput> {
    check_scene(cfg, scene)?;
    let map = &scene.features;
    let gts = &scene.boxes;
    let mut clock = Clock::new();
    let start = clock.last;

    let s_bev = match (&cfg.mask_scores, &params.mask) {
        (MaskSource::Oracle, _) => scene.oracle.clone(),
        (MaskSource::Predictor, Some(mask)) => mask_scores(map, mask)?,
        (MaskSource::Predictor, None) => {
            return Err(HarnessError::Validation("mask predictor parameters not loaded".into()))
        }
    };
    clock.lap("mask_scores");

    let flat = QuerySet::from_map(&map.with_position_embedding()?);
    let mut coarse = foreground_select(&flat, &s_bev, cfg.dqs.r)?;
    coarse.boxes = Some(anchors(map, &coarse, cfg)?);
    clock.lap("foreground_select");

    let mut proposals = layer_forward(&coarse, map, &params.dqs_layer, &cfg.extent)?.queries;
    clock.lap("dqs_layer");

    attach_quality(&mut proposals, cfg.dqs.beta, cfg.dqs.tau)?;
    let selected = quality_select(&proposals, cfg.dqs.n_f)?;
    let b_f = selected.boxes_required()?.to_vec();
    let s_f = selected.scores.fused.clone().expect("quality_select attaches fused scores");
    let mut fine = QuerySet::new(
        embed_quality_queries(&b_f, &s_f, &params.query_embed, &cfg.extent)?,
        selected.sources.clone(),
    )?;
    fine.boxes = Some(b_f);
    fine.scores.fused = Some(s_f);
    clock.lap("quality_select");

    let decoded = decoder_forward(&fine, map, &params.layers, &cfg.extent)?;
    clock.lap("decoder");

    let mut final_queries = decoded.final_queries().clone();
    attach_quality(&mut final_queries, cfg.dqs.beta, cfg.dqs.tau)?;
    final_queries.scores.fused = final_queries.scores.quality.clone();
    let final_assignment = match_set(&final_queries, gts, cfg)?;

    proposals.scores.fused = proposals.scores.quality.clone();
    let dqs_assignment = match_set(&proposals, gts, cfg)?;
    let losses = dqs_loss_values(&proposals, gts, &dqs_assignment, &cfg.extent)?;
    clock.lap("matching");
    clock
        .timings
        .insert("total".into(), (clock.last - start).as_secs_f64() * 1e3);

    let boxes = final_queries.boxes_required()?;
    let s_c = final_queries.scores.classification.as_ref().expect("decoder sets s_c");
    let s_l = final_queries.scores.localization.as_ref().expect("decoder sets s_l");
    let fused = final_queries.scores.fused.as_ref().expect("attached above");
    let detections = (0..final_queries.len())
        .map(|i| Detection {
            bbox: boxes[i],
            s_c: s_c[i],
            s_l: s_l[i],
            s_f: fused[i],
        })
        .collect();

    let metrics = MetricsReport {
        dqs_recall: dqs_recall(map, &coarse, gts),
        fine_recall: fine_recall(fine.boxes_required()?, gts),
        matched_cost_mean: (!gts.is_empty()).then(|| final_assignment.total_cost / gts.len() as f64),
        n_c: coarse.len(),
        n_f_effective: fine.len(),
        num_gts: gts.len(),
        timings_ms: clock.timings,
    };
    let report = RunReport {
        format_version: 1,
        metrics,
        losses,
        assignment: Assignments {
            dqs: dqs_assignment,
            final_layer: final_assignment,
        },
        detections,
        map: MapMeta {
            height: map.height(),
            width: map.width(),
            channels: map.channels(),
            georef: *map.georef(),
        },
        attention: AttentionMeta {
            layers: params.layers.len(),
            queries: fine.len(),
            heads: cfg.dga.heads,
            grid_points: cfg.dga.k * cfg.dga.k,
        },
    };
    Ok(RunOutput {
        report,
        s_bev,
        attention: decoded.layers.into_iter().map(|l| l.attention).collect(),
        fine,
        final_queries,
    })
}

/// Builds parameters from the config (relative parameter directories resolve against `base`) and runs.
pub fn run_pipeline(cfg: &RunConfig, scene: &Scene, base: &Path) -> Result<RunOutput> {
    let mut store = cfg.params.store(base)?;
    let params = HeadParams::from_store(&mut store, cfg)?;
    run_with_params(cfg, scene, &params)
}

impl RunOutput {
    /// Writes the report, attention tensors and the score background to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        json::write(&dir.join(REPORT_FILE), &self.report)?;
        let meta = &self.report.attention;
        let per_query = meta.heads * meta.grid_points;
        let mut positions = Vec::with_capacity(meta.layers * meta.queries * per_query * 2);
        let mut weights = Vec::with_capacity(meta.layers * meta.queries * per_query);
        for layer in &self.attention {
            for trace in layer {
                positions.extend(trace.positions.iter().flat_map(|p| [p[0] as f32, p[1] as f32]));
                weights.extend(trace.weights.iter().map(|&w| w as f32));
            }
        }
        let path = dir.join(POSITIONS_FILE);
        write_tensor(&path, &[meta.layers, meta.queries, per_query, 2], &positions)
            .map_err(|e| HarnessError::tensor(&path, e))?;
        let path = dir.join(WEIGHTS_FILE);
        write_tensor(&path, &[meta.layers, meta.queries, per_query], &weights).map_err(|e| HarnessError::tensor(&path, e))?;
        let path = dir.join(SCORES_FILE);
        let scores: Vec<f32> = self.s_bev.iter().map(|&v| v as f32).collect();
        write_tensor(&path, &[self.report.map.height, self.report.map.width], &scores)
            .map_err(|e| HarnessError::tensor(&path, e))
    }
}
