// SPDX-License-Identifier: Apache-2.0

//! Synthetic BEV scenes: separated boxes rendered as oriented Gaussian blobs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use seed_head::bev::{read_tensor, write_tensor, BevFeatureMap, Georef};
use seed_head::boxgeom::{bev_intersection_area, Box3D, SceneExtent};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::json;

pub const FEATURES_FILE: &str = "features.bevt";
pub const ORACLE_FILE: &str = "oracle_scores.bevt";
pub const BOXES_FILE: &str = "boxes.json";
pub const SPEC_FILE: &str = "scene.json";

/// Draws allowed per object before the scene is declared too crowded.
pub const MAX_ATTEMPTS: usize = 10_000;
/// Weight of the deterministic noise mixed into the oracle scores.
pub const ORACLE_NOISE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            height: 64,
            width: 64,
            channels: 32,
            cell_size: 1.0,
        }
    }
}

impl GridSpec {
    pub fn georef(&self) -> Georef {
        Georef::centered(self.height, self.width, self.cell_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_objects: usize,
    /// Region (centered on the origin) the boxes must fit in.
    pub extent: SceneExtent,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    pub heading: [f64; 2],
    /// Larger values make the blobs fall off faster across the footprint.
    pub blob_sharpness: f64,
    /// Amplitude of the uniform feature noise.
    pub noise: f64,
    pub grid: GridSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            num_objects: 5,
            extent: SceneExtent {
                x: 64.0,
                y: 64.0,
                z: 6.0,
            },
            length: [3.5, 5.0],
            width: [1.6, 2.2],
            height: [1.4, 2.0],
            heading: [-PI, PI],
            blob_sharpness: 1.0,
            noise: 0.01,
            grid: GridSpec::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(HarnessError::config(
            format!("/{name}"),
            format!("range [{}, {}] is empty or not finite", r[0], r[1]),
        ));
    }
    if positive && r[0] <= 0.0 {
        return Err(HarnessError::config(format!("/{name}/0"), "sizes must be positive"));
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("x", self.extent.x), ("y", self.extent.y), ("z", self.extent.z)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(HarnessError::config(format!("/extent/{name}"), "must be positive"));
            }
        }
        check_range("length", self.length, true)?;
        check_range("width", self.width, true)?;
        check_range("height", self.height, true)?;
        check_range("heading", self.heading, false)?;
        if !(self.blob_sharpness.is_finite() && self.blob_sharpness > 0.0) {
            return Err(HarnessError::config("/blob_sharpness", "must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(HarnessError::config("/noise", "must be >= 0"));
        }
        let g = &self.grid;
        if g.height == 0 || g.width == 0 || g.channels == 0 {
            return Err(HarnessError::config("/grid", "dimensions must be >= 1"));
        }
        if !(g.cell_size.is_finite() && g.cell_size > 0.0) {
            return Err(HarnessError::config("/grid/cell_size", "must be positive"));
        }
        if self.extent.x > g.width as f64 * g.cell_size || self.extent.y > g.height as f64 * g.cell_size {
            return Err(HarnessError::config("/extent", "extends beyond the feature grid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub boxes: Vec<Box3D>,
    pub features: BevFeatureMap,
    /// Ideal foreground score per cell, flat index order.
    pub oracle: Vec<f64>,
}

fn uniform(rng: &mut Xoshiro256PlusPlus, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sample_box(spec: &SceneSpec, rng: &mut Xoshiro256PlusPlus) -> Result<Box3D> {
    let l = uniform(rng, spec.length);
    let w = uniform(rng, spec.width);
    let h = uniform(rng, spec.height);
    let theta = uniform(rng, spec.heading);
    let radius = 0.5 * l.hypot(w);
    let ex = 0.5 * spec.extent.x - radius;
    let ey = 0.5 * spec.extent.y - radius;
    if ex < 0.0 || ey < 0.0 {
        return Err(HarnessError::Validation(format!(
            "a {l:.2} x {w:.2} box does not fit in the scene extent"
        )));
    }
    let ez = (0.5 * (spec.extent.z - h)).max(0.0);
    let x = uniform(rng, [-ex, ex]);
    let y = uniform(rng, [-ey, ey]);
    let z = uniform(rng, [-ez, ez]);
    Ok(Box3D::new(x, y, z, l, w, h, theta)?)
}

/// Blob intensity of `b` at a world point, 1 at the center.
pub fn blob_intensity(b: &Box3D, sharpness: f64, p: [f64; 2]) -> f64 {
    let (s, c) = b.theta().sin_cos();
    let dx = p[0] - b.x();
    let dy = p[1] - b.y();
    let u = (c * dx + s * dy) / (0.5 * b.l());
    let v = (-s * dx + c * dy) / (0.5 * b.w());
    (-0.5 * sharpness * (u * u + v * v)).exp()
}

pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.num_objects);
    for index in 0..spec.num_objects {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let candidate = sample_box(spec, &mut rng)?;
            if boxes.iter().all(|b| bev_intersection_area(b, &candidate) <= 0.0) {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(HarnessError::Validation(format!(
                "scene too crowded: object {index} not placed after {MAX_ATTEMPTS} attempts"
            )));
        }
    }

    let g = spec.grid;
    let c = g.channels;
    let amplitudes: Vec<f64> = (0..boxes.len() * c).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut features = BevFeatureMap::zeros(g.height, g.width, c, g.georef())?;
    let mut oracle = vec![0.0; g.height * g.width];
    let mut intensity = vec![0.0; boxes.len()];
    for row in 0..g.height {
        for col in 0..g.width {
            let (x, y) = features.feature_to_world(seed_head::bev::FeatureCoord::new(row as f64, col as f64));
            for (o, b) in boxes.iter().enumerate() {
                intensity[o] = blob_intensity(b, spec.blob_sharpness, [x, y]);
            }
            let cell = features.cell_mut(row, col);
            for (k, v) in cell.iter_mut().enumerate() {
                let signal: f64 = intensity.iter().enumerate().map(|(o, i)| amplitudes[o * c + k] * i).sum();
                *v = signal + spec.noise * (2.0 * rng.random::<f64>() - 1.0);
            }
            let peak = intensity.iter().copied().fold(0.0, f64::max);
            oracle[row * g.width + col] = (1.0 - ORACLE_NOISE) * peak + ORACLE_NOISE * rng.random::<f64>();
        }
    }
    Ok(Scene {
        spec: spec.clone(),
        boxes,
        features,
        oracle,
    })
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Scene {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let f = &self.features;
        let path = dir.join(FEATURES_FILE);
        write_tensor(&path, &[f.height(), f.width(), f.channels()], &to_f32(f.data()))
            .map_err(|e| HarnessError::tensor(&path, e))?;
        let path = dir.join(ORACLE_FILE);
        write_tensor(&path, &[f.height(), f.width()], &to_f32(&self.oracle)).map_err(|e| HarnessError::tensor(&path, e))?;
        json::write(&dir.join(BOXES_FILE), &self.boxes)?;
        json::write(&dir.join(SPEC_FILE), &self.spec)
    }

    /// Reads a scene directory. Features and oracle scores come back at f32 precision.
    pub fn load(dir: &Path) -> Result<Scene> {
        let spec: SceneSpec = json::read(&dir.join(SPEC_FILE))?;
        spec.validate()?;
        let boxes: Vec<Box3D> = json::read(&dir.join(BOXES_FILE))?;
        let path = dir.join(FEATURES_FILE);
        let (dims, data) = read_tensor(&path).map_err(|e| HarnessError::tensor(&path, e))?;
        if dims.len() != 3 {
            return Err(HarnessError::Validation(format!(
                "{}: expected an H x W x C tensor, got dims {dims:?}",
                path.display()
            )));
        }
        let georef = Georef::centered(dims[0], dims[1], spec.grid.cell_size);
        let features = BevFeatureMap::new(dims[0], dims[1], dims[2], georef, data.iter().map(|&v| v as f64).collect())?;
        let path = dir.join(ORACLE_FILE);
        let (odims, odata) = read_tensor(&path).map_err(|e| HarnessError::tensor(&path, e))?;
        if odims != [dims[0], dims[1]] {
            return Err(HarnessError::Validation(format!(
                "{}: expected dims [{}, {}], got {odims:?}",
                path.display(),
                dims[0],
                dims[1]
            )));
        }
        Ok(Scene {
            spec,
            boxes,
            features,
            oracle: odata.iter().map(|&v| v as f64).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_noise_floor() {
        let spec = SceneSpec {
            num_objects: 0,
            ..Default::default()
        };
        let s = gen_scene(&spec).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.features.data().iter().all(|v| v.abs() <= spec.noise));
        assert!(s.oracle.iter().all(|&v| (0.0..=ORACLE_NOISE).contains(&v)));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
        let other = gen_scene(&SceneSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(other.boxes, gen_scene(&SceneSpec { seed: 42, ..Default::default() }).unwrap().boxes);
    }

    #[test]
    fn boxes_are_separated_and_inside() {
        for seed in 0..5 {
            let s = gen_scene(&SceneSpec { seed, num_objects: 12, ..Default::default() }).unwrap();
            for (i, a) in s.boxes.iter().enumerate() {
                assert!(a.x().abs() <= 32.0 && a.y().abs() <= 32.0);
                for b in &s.boxes[i + 1..] {
                    assert_eq!(bev_intersection_area(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn centers_score_above_seventieth_percentile() {
        for seed in 0..10 {
            let s = gen_scene(&SceneSpec { seed, ..Default::default() }).unwrap();
            let mut sorted = s.oracle.clone();
            sorted.sort_by(f64::total_cmp);
            let p70 = sorted[(0.7 * (sorted.len() - 1) as f64).round() as usize];
            for b in &s.boxes {
                let cell = s.features.cell_index_at(b.x(), b.y()).unwrap();
                assert!(s.oracle[cell] > p70, "seed {seed}: {} <= {p70}", s.oracle[cell]);
            }
        }
    }

    #[test]
    fn crowded_scene_fails() {
        let spec = SceneSpec {
            num_objects: 50,
            extent: SceneExtent { x: 12.0, y: 12.0, z: 4.0 },
            ..Default::default()
        };
        assert!(matches!(gen_scene(&spec), Err(HarnessError::Validation(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_scene(&SceneSpec { seed: 3, ..Default::default() }).unwrap();
        s.save(dir.path()).unwrap();
        let back = Scene::load(dir.path()).unwrap();
        assert_eq!(back.boxes, s.boxes);
        assert_eq!(back.spec, s.spec);
        for (a, b) in back.features.data().iter().zip(s.features.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
