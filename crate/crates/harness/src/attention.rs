// SPDX-License-Identifier: Apache-2.0

//! Grayscale attention images: sampling positions splatted over a dim score background.

use std::fs;
use std::path::Path;

use seed_head::bev::{read_tensor, Georef};

use crate::error::{HarnessError, Result};
use crate::json;
use crate::pipeline::{POSITIONS_FILE, SCORES_FILE, WEIGHTS_FILE};
use crate::report::{RunReport, REPORT_FILE};

/// Brightest background level; splats use the full range above it.
pub const BACKGROUND_LEVEL: f64 = 48.0;

/// 8-bit image, row 0 first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses the binary PGM written by [`GrayImage::to_pgm`].
    pub fn from_pgm(bytes: &[u8]) -> Option<GrayImage> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return None;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return None;
        }
        let width: usize = fields[1].parse().ok()?;
        let height: usize = fields[2].parse().ok()?;
        let pixels = bytes.get(pos + 1..)?.to_vec();
        (pixels.len() == width * height).then_some(GrayImage { width, height, pixels })
    }
}

/// Splats `positions` (world meters) with `weights / heads` onto an `height × width` image.
///
/// Each pixel accumulates the weight of every position that rounds to it; the
/// largest accumulation maps to 255. `background` (one value per cell, expected
/// in [0, 1]) is drawn dimly underneath.
pub fn render_attention(
    height: usize,
    width: usize,
    georef: &Georef,
    background: &[f64],
    positions: &[[f64; 2]],
    weights: &[f64],
    heads: usize,
) -> Result<GrayImage> {
    if background.len() != height * width {
        return Err(HarnessError::Validation("background does not match the map size".into()));
    }
    if positions.len() != weights.len() || heads == 0 {
        return Err(HarnessError::Validation("positions and weights disagree".into()));
    }
    let mut acc = vec![0.0; height * width];
    for (p, w) in positions.iter().zip(weights) {
        let col = ((p[0] - georef.origin_x) / georef.cell_size_x).round();
        let row = ((p[1] - georef.origin_y) / georef.cell_size_y).round();
        if row >= 0.0 && col >= 0.0 && (row as usize) < height && (col as usize) < width {
            acc[row as usize * width + col as usize] += w / heads as f64;
        }
    }
    let peak = acc.iter().copied().fold(0.0, f64::max);
    let pixels = acc
        .iter()
        .zip(background)
        .map(|(&a, &b)| {
            let bg = (b.clamp(0.0, 1.0) * BACKGROUND_LEVEL).round();
            let splat = if peak > 0.0 { (a / peak * 255.0).round() } else { 0.0 };
            bg.max(splat) as u8
        })
        .collect();
    Ok(GrayImage { width, height, pixels })
}

/// Renders one query of one decoder layer from a run directory and writes it as PGM.
pub fn dump_attention(run: &Path, query: usize, layer: usize, out: &Path) -> Result<GrayImage> {
    let report: RunReport = json::read(&run.join(REPORT_FILE))?;
    let meta = &report.attention;
    if layer >= meta.layers {
        return Err(HarnessError::Validation(format!(
            "layer {layer} out of range (run has {} layers)",
            meta.layers
        )));
    }
    if query >= meta.queries {
        return Err(HarnessError::Validation(format!(
            "query {query} out of range (run has {} queries)",
            meta.queries
        )));
    }
    let per_query = meta.heads * meta.grid_points;
    let load = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
        let path = run.join(name);
        let (d, data) = read_tensor(&path).map_err(|e| HarnessError::tensor(&path, e))?;
        if d != dims {
            return Err(HarnessError::Validation(format!(
                "{}: dims {d:?}, expected {dims:?}",
                path.display()
            )));
        }
        Ok(data)
    };
    let positions = load(POSITIONS_FILE, &[meta.layers, meta.queries, per_query, 2])?;
    let weights = load(WEIGHTS_FILE, &[meta.layers, meta.queries, per_query])?;
    let background = load(SCORES_FILE, &[report.map.height, report.map.width])?;

    let at = (layer * meta.queries + query) * per_query;
    let pos: Vec<[f64; 2]> = positions[2 * at..2 * (at + per_query)]
        .chunks_exact(2)
        .map(|p| [p[0] as f64, p[1] as f64])
        .collect();
    let w: Vec<f64> = weights[at..at + per_query].iter().map(|&v| v as f64).collect();
    let bg: Vec<f64> = background.iter().map(|&v| v as f64).collect();
    let image = render_attention(report.map.height, report.map.width, &report.map.georef, &bg, &pos, &w, meta.heads)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(out, image.to_pgm()).map_err(|e| HarnessError::io(out, e))?;
    Ok(image)
}
