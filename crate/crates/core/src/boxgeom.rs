// SPDX-License-Identifier: Apache-2.0

//! Upright oriented boxes, their BEV footprints and overlap measures.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Collinearity tolerance for polygon validation.
pub const COLLINEAR_EPS: f64 = 1e-9;

/// Maps an angle onto (−π, π].
pub fn canonical_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// 7-DoF upright box. `theta` is measured counterclockwise from +x and is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct Box3D {
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    theta: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl TryFrom<RawBox> for Box3D {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        Box3D::new(r.x, r.y, r.z, r.l, r.w, r.h, r.theta)
    }
}

/// Per-axis scene range in meters, used to normalize box encodings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneExtent {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SceneExtent {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let ext = SceneExtent { x, y, z };
        ext.validate()?;
        Ok(ext)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.x, self.y, self.z]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "scene extent must be positive, got {self:?}"
            )))
        }
    }
}

impl Box3D {
    #[allow(clippy::too_many_arguments)]
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if ![x, y, z, l, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite parameter".into()));
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got l={l} w={w} h={h}"
            )));
        }
        Ok(Box3D {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }
    pub fn l(&self) -> f64 {
        self.l
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn center_bev(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Box rigidly rotated by `angle` about world point `pivot` and then shifted by `shift`.
    pub fn transformed(&self, pivot: [f64; 2], angle: f64, shift: [f64; 2]) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (self.x - pivot[0], self.y - pivot[1]);
        Box3D::new(
            pivot[0] + c * dx - s * dy + shift[0],
            pivot[1] + s * dx + c * dy + shift[1],
            self.z,
            self.l,
            self.w,
            self.h,
            self.theta + angle,
        )
    }

    /// Maps a point from box-local (along-l, along-w) coordinates to world BEV.
    pub fn local_to_world(&self, u: f64, v: f64) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * u - s * v, self.y + s * u + c * v]
    }

    /// `(x, y, z, l, w, h, sinθ, cosθ)` with positions and sizes divided per axis by `extent`.
    pub fn encode(&self, extent: &SceneExtent) -> [f64; 8] {
        let (s, c) = self.theta.sin_cos();
        [
            self.x / extent.x,
            self.y / extent.y,
            self.z / extent.z,
            self.l / extent.x,
            self.w / extent.y,
            self.h / extent.z,
            s,
            c,
        ]
    }
}

/// Convex counterclockwise polygon in the BEV plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPolygon {
    vertices: Vec<[f64; 2]>,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn shoelace(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice
}

impl BevPolygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::DegeneratePolygon(format!("{n} vertices")));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegeneratePolygon("non-finite vertex".into()));
        }
        if shoelace(&vertices) <= COLLINEAR_EPS {
            return Err(Error::DegeneratePolygon(
                "zero area or clockwise orientation".into(),
            ));
        }
        for i in 0..n {
            let turn = cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if turn < -COLLINEAR_EPS {
                return Err(Error::DegeneratePolygon(format!(
                    "reflex turn at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        Ok(BevPolygon { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }
}

/// Footprint corners `center + R(θ)·(±l/2, ±w/2)`, counterclockwise.
pub fn box_corners_bev(b: &Box3D) -> BevPolygon {
    let (hl, hw) = (0.5 * b.l, 0.5 * b.w);
    let vertices = vec![
        b.local_to_world(-hl, -hw),
        b.local_to_world(hl, -hw),
        b.local_to_world(hl, hw),
        b.local_to_world(-hl, hw),
    ];
    BevPolygon { vertices }
}

fn segment_line_intersection(s: [f64; 2], e: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let ds = cross(a, b, s);
    let de = cross(a, b, e);
    let t = ds / (ds - de);
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

/// Sutherland–Hodgman clip of `subject` against every edge of `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for k in 0..n {
            let cur = input[k];
            let prev = input[(k + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the intersection of two convex CCW polygons.
pub fn polygon_intersection_area(a: &BevPolygon, b: &BevPolygon) -> f64 {
    shoelace(&clip_convex(a.vertices(), b.vertices())).max(0.0)
}

/// Validating wrapper for raw vertex lists.
pub fn polygon_intersection_area_checked(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    let a = BevPolygon::new(a.to_vec())?;
    let b = BevPolygon::new(b.to_vec())?;
    Ok(polygon_intersection_area(&a, &b))
}

pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // Cheap reject on circumscribed circles.
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.x - b.x).hypot(a.y - b.y) > ra + rb {
        return 0.0;
    }
    polygon_intersection_area(&box_corners_bev(a), &box_corners_bev(b))
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    ratio(inter, a.bev_area() + b.bev_area() - inter)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let top = (a.z + 0.5 * a.h).min(b.z + 0.5 * b.h);
    let bottom = (a.z - 0.5 * a.h).max(b.z - 0.5 * b.h);
    let overlap_h = (top - bottom).max(0.0);
    if overlap_h == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_h;
    ratio(inter, a.volume() + b.volume() - inter)
}

/// Generalized IoU of the rotated footprints, with the axis-aligned rectangle
/// enclosing both footprints as the enclosing region.
pub fn giou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let pa = box_corners_bev(a);
    let pb = box_corners_bev(b);
    let inter = polygon_intersection_area(&pa, &pb);
    let union = a.bev_area() + b.bev_area() - inter;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pa.vertices().iter().chain(pb.vertices()) {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let enclosing = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let iou = ratio(inter, union);
    // union ⊆ enclosing, so the penalty is non-negative up to rounding
    let penalty = ((enclosing - union) / enclosing).max(0.0);
    iou - penalty
}

/// Centers of the `k × k` subdivision of the footprint, index `j·k + i` with `i`
/// running along the l-axis.
pub fn grid_reference_points(b: &Box3D, k: usize) -> Result<Vec<[f64; 2]>> {
    if k == 0 {
        return Err(Error::InvalidArgument("grid side k must be >= 1".into()));
    }
    let kf = k as f64;
    let mut points = Vec::with_capacity(k * k);
    for j in 0..k {
        let v = (-0.5 + (j as f64 + 0.5) / kf) * b.w;
        for i in 0..k {
            let u = (-0.5 + (i as f64 + 0.5) / kf) * b.l;
            points.push(b.local_to_world(u, v));
        }
    }
    Ok(points)
}
