// SPDX-License-Identifier: Apache-2.0

//! Deformable grid attention.
//!
//! Each query places a `k × k` grid of reference points inside its box, shifts
//! every point by a predicted world-frame offset (per head), samples the BEV map
//! bilinearly at the shifted positions and mixes the value-projected samples
//! with per-head softmax weights. Head outputs are concatenated and passed
//! through the output projection.
//!
//! Offsets are laid out `[head][grid point][x, y]`; attention weights `[head][grid point]`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::bev::BevFeatureMap;
use crate::boxgeom::{grid_reference_points, Box3D};
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Linear};
use crate::params::ParamStore;

pub const DEFAULT_GRID: usize = 5;
pub const DEFAULT_HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DgaParams {
    k: usize,
    heads: usize,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
}

/// Sampling positions (world meters) and attention weights of one query,
/// both indexed `head · K + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgaTrace {
    pub positions: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl DgaParams {
    pub fn new(
        k: usize,
        heads: usize,
        offset_proj: Linear,
        weight_proj: Linear,
        value_proj: Linear,
        output_proj: Linear,
    ) -> Result<Self> {
        if k == 0 || heads == 0 {
            return Err(Error::InvalidArgument("grid side and head count must be >= 1".into()));
        }
        let c = value_proj.input_dim();
        if c % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {c} not divisible by {heads} heads"
            )));
        }
        let kk = k * k;
        let checks = [
            ("offset projection input", offset_proj.input_dim(), c),
            ("offset projection output", offset_proj.output_dim(), heads * kk * 2),
            ("weight projection input", weight_proj.input_dim(), c),
            ("weight projection output", weight_proj.output_dim(), heads * kk),
            ("value projection output", value_proj.output_dim(), c),
            ("output projection input", output_proj.input_dim(), c),
            ("output projection output", output_proj.output_dim(), c),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(Error::shape(what, expected, found));
            }
        }
        Ok(DgaParams {
            k,
            heads,
            offset_proj,
            weight_proj,
            value_proj,
            output_proj,
        })
    }

    pub fn from_store(store: &mut ParamStore, prefix: &str, channels: usize, k: usize, heads: usize) -> Result<Self> {
        let kk = k * k;
        Self::new(
            k,
            heads,
            Linear::from_store(store, &format!("{prefix}.offset"), channels, heads * kk * 2)?,
            Linear::from_store(store, &format!("{prefix}.weight"), channels, heads * kk)?,
            Linear::from_store(store, &format!("{prefix}.value"), channels, channels)?,
            Linear::from_store(store, &format!("{prefix}.output"), channels, channels)?,
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid_points(&self) -> usize {
        self.k * self.k
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.value_proj.input_dim()
    }

    fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// `M × K × 2` world-frame offsets for one query.
pub fn predict_offsets(query: ArrayView1<f64>, params: &DgaParams) -> Result<Array3<f64>> {
    let flat = params.offset_proj.forward_vec(query)?;
    Ok(flat
        .into_shape_with_order((params.heads, params.grid_points(), 2))
        .expect("offset projection width checked"))
}

/// `M × K` attention weights, softmax-normalized per head.
pub fn predict_weights(query: ArrayView1<f64>, params: &DgaParams) -> Result<Array2<f64>> {
    let logits = params.weight_proj.forward_vec(query)?;
    let mut weights = logits
        .into_shape_with_order((params.heads, params.grid_points()))
        .expect("weight projection width checked");
    for mut row in weights.axis_iter_mut(Axis(0)) {
        softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
    }
    Ok(weights)
}

/// Attention output for one query at explicit sampling positions (`head · K + j`).
fn attend(
    map: &BevFeatureMap,
    positions: &[[f64; 2]],
    weights: &Array2<f64>,
    params: &DgaParams,
) -> Result<Array1<f64>> {
    let c = params.channels();
    let kk = params.grid_points();
    let dh = params.head_dim();
    let mut heads_out = Array1::<f64>::zeros(c);
    let mut sample = vec![0.0; map.channels()];
    for m in 0..params.heads {
        let w_v = params.value_proj.weight.slice(s![m * dh..(m + 1) * dh, ..]);
        let b_v = params.value_proj.bias.slice(s![m * dh..(m + 1) * dh]);
        let mut acc = heads_out.slice_mut(s![m * dh..(m + 1) * dh]);
        for j in 0..kk {
            let p = positions[m * kk + j];
            map.bilinear_sample_into(map.world_to_feature(p[0], p[1]), &mut sample)?;
            let value = w_v.dot(&ArrayView1::from(&sample[..])) + &b_v;
            acc.scaled_add(weights[[m, j]], &value);
        }
    }
    params.output_proj.forward_vec(heads_out.view())
}

fn check_map(map: &BevFeatureMap, params: &DgaParams) -> Result<()> {
    if map.channels() != params.channels() {
        return Err(Error::shape("BEV channels", params.channels(), map.channels()));
    }
    Ok(())
}

fn displaced(grid: &[[f64; 2]], offsets: &Array3<f64>) -> Vec<[f64; 2]> {
    let (heads, kk, _) = offsets.dim();
    let mut positions = Vec::with_capacity(heads * kk);
    for m in 0..heads {
        for (j, g) in grid.iter().enumerate() {
            positions.push([g[0] + offsets[[m, j, 0]], g[1] + offsets[[m, j, 1]]]);
        }
    }
    positions
}

/// One query through DGA with externally supplied offsets.
pub fn dga_query_with_offsets(
    query: ArrayView1<f64>,
    reference: &Box3D,
    map: &BevFeatureMap,
    params: &DgaParams,
    offsets: &Array3<f64>,
) -> Result<Array1<f64>> {
    check_map(map, params)?;
    if offsets.dim() != (params.heads, params.grid_points(), 2) {
        return Err(Error::shape("offsets", params.heads * params.grid_points() * 2, offsets.len()));
    }
    let grid = grid_reference_points(reference, params.k)?;
    let weights = predict_weights(query, params)?;
    attend(map, &displaced(&grid, offsets), &weights, params)
}

fn forward_rows<F>(features: ArrayView2<f64>, boxes: &[Box3D], params: &DgaParams, row: F) -> Result<(Array2<f64>, Vec<DgaTrace>)>
where
    F: Fn(ArrayView1<f64>, &Box3D) -> Result<(Array1<f64>, DgaTrace)> + Sync,
{
    if features.ncols() != params.channels() {
        return Err(Error::shape("query channels", params.channels(), features.ncols()));
    }
    if boxes.len() != features.nrows() {
        return Err(Error::shape("reference boxes", features.nrows(), boxes.len()));
    }
    let rows: Vec<(Array1<f64>, DgaTrace)> = (0..features.nrows())
        .into_par_iter()
        .map(|i| row(features.row(i), &boxes[i]))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((features.nrows(), params.channels()));
    let mut traces = Vec::with_capacity(rows.len());
    for (i, (r, t)) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
        traces.push(t);
    }
    Ok((out, traces))
}

/// Deformable grid attention for every query; also returns where each query looked.
pub fn dga_forward_traced(
    features: ArrayView2<f64>,
    boxes: &[Box3D],
    map: &BevFeatureMap,
    params: &DgaParams,
) -> Result<(Array2<f64>, Vec<DgaTrace>)> {
    check_map(map, params)?;
    forward_rows(features, boxes, params, |q, b| {
        let grid = grid_reference_points(b, params.k)?;
        let offsets = predict_offsets(q, params)?;
        let weights = predict_weights(q, params)?;
        let positions = displaced(&grid, &offsets);
        let out = attend(map, &positions, &weights, params)?;
        Ok((
            out,
            DgaTrace {
                positions,
                weights: weights.into_raw_vec_and_offset().0,
            },
        ))
    })
}

/// `N × C` enhanced query features.
pub fn dga_forward(
    features: ArrayView2<f64>,
    boxes: &[Box3D],
    map: &BevFeatureMap,
    params: &DgaParams,
) -> Result<Array2<f64>> {
    Ok(dga_forward_traced(features, boxes, map, params)?.0)
}

/// Box attention: the same mixing over the undisplaced grid, with the offset
/// branch never evaluated.
pub fn box_attention_forward(
    features: ArrayView2<f64>,
    boxes: &[Box3D],
    map: &BevFeatureMap,
    params: &DgaParams,
) -> Result<Array2<f64>> {
    check_map(map, params)?;
    let (out, _) = forward_rows(features, boxes, params, |q, b| {
        let grid = grid_reference_points(b, params.k)?;
        let positions: Vec<[f64; 2]> = (0..params.heads).flat_map(|_| grid.iter().copied()).collect();
        let weights = predict_weights(q, params)?;
        let out = attend(map, &positions, &weights, params)?;
        Ok((
            out,
            DgaTrace {
                positions,
                weights: Vec::new(),
            },
        ))
    })?;
    Ok(out)
}

/// Analytic `∂ output[channel] / ∂ offsets` for one query, shaped like the offsets.
pub fn offset_gradient(
    query: ArrayView1<f64>,
    reference: &Box3D,
    map: &BevFeatureMap,
    params: &DgaParams,
    offsets: &Array3<f64>,
    channel: usize,
) -> Result<Array3<f64>> {
    check_map(map, params)?;
    if channel >= params.channels() {
        return Err(Error::InvalidArgument(format!("channel {channel} out of range")));
    }
    let grid = grid_reference_points(reference, params.k)?;
    let weights = predict_weights(query, params)?;
    let positions = displaced(&grid, offsets);
    let kk = params.grid_points();
    let dh = params.head_dim();
    let g = &map.georef();
    let mut grad = Array3::zeros(offsets.dim());
    for m in 0..params.heads {
        // uᵀ = W_o[channel, head m] · W_v[head m, :]
        let w_o = params.output_proj.weight.slice(s![channel, m * dh..(m + 1) * dh]);
        let w_v = params.value_proj.weight.slice(s![m * dh..(m + 1) * dh, ..]);
        let u = w_o.dot(&w_v);
        for j in 0..kk {
            let p = positions[m * kk + j];
            let jac = map.bilinear_sample_jacobian(map.world_to_feature(p[0], p[1]))?;
            let d_col = u.dot(&ArrayView1::from(&jac.d_col[..]));
            let d_row = u.dot(&ArrayView1::from(&jac.d_row[..]));
            let a = weights[[m, j]];
            grad[[m, j, 0]] = a * d_col / g.cell_size_x;
            grad[[m, j, 1]] = a * d_row / g.cell_size_y;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::Georef;

    fn params(c: usize, k: usize, heads: usize, seed: u64) -> DgaParams {
        DgaParams::from_store(&mut ParamStore::seeded(seed), "dga", c, k, heads).unwrap()
    }

    fn with_identity_projections(mut p: DgaParams) -> DgaParams {
        let c = p.channels();
        p.value_proj = Linear::identity(c);
        p.output_proj = Linear::identity(c);
        p
    }

    #[test]
    fn shape_validation() {
        let c = 8;
        assert!(DgaParams::new(
            2,
            3,
            Linear::zeros(c, 3 * 4 * 2),
            Linear::zeros(c, 3 * 4),
            Linear::zeros(c, c),
            Linear::zeros(c, c)
        )
        .is_err());
        assert!(DgaParams::new(
            2,
            2,
            Linear::zeros(c, 7),
            Linear::zeros(c, 8),
            Linear::zeros(c, c),
            Linear::zeros(c, c)
        )
        .is_err());
    }

    #[test]
    fn offsets_examples() {
        let mut p = params(8, 3, 2, 1);
        let q1 = Array1::from_iter((0..8).map(|v| v as f64 * 0.1 - 0.3));
        let q2 = Array1::from_iter((0..8).map(|v| (v as f64).sin()));
        p.offset_proj.bias.fill(0.0);
        let sum = predict_offsets((&q1 + &q2).view(), &p).unwrap();
        let parts = predict_offsets(q1.view(), &p).unwrap() + predict_offsets(q2.view(), &p).unwrap();
        assert!((&sum - &parts).iter().all(|d| d.abs() < 1e-12));
        let doubled = predict_offsets((&q1 * 2.0).view(), &p).unwrap();
        let single = predict_offsets(q1.view(), &p).unwrap();
        assert!((&doubled - &(single * 2.0)).iter().all(|d| d.abs() < 1e-12));

        p.offset_proj = Linear::zeros(8, p.heads * p.grid_points() * 2);
        assert!(predict_offsets(q1.view(), &p).unwrap().iter().all(|v| *v == 0.0));
        assert!(predict_offsets(Array1::zeros(5).view(), &p).is_err());
    }

    #[test]
    fn weights_examples() {
        let mut p = params(8, 3, 2, 2);
        let q = Array1::from_iter((0..8).map(|v| v as f64 * 0.3));
        let w = predict_weights(q.view(), &p).unwrap();
        for row in w.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }

        p.weight_proj = Linear::zeros(8, 2 * 9);
        let w = predict_weights(q.view(), &p).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));

        // shift one head's logits by a constant
        let mut shifted = p.clone();
        shifted.weight_proj = params(8, 3, 2, 2).weight_proj;
        let base = predict_weights(q.view(), &shifted).unwrap();
        for j in 0..9 {
            shifted.weight_proj.bias[j] += 3.75;
        }
        let moved = predict_weights(q.view(), &shifted).unwrap();
        assert!((&base - &moved).iter().all(|d| d.abs() <= 1e-12));

        // saturate position 4 of head 1
        p.weight_proj.bias[9 + 4] = 40.0;
        let w = predict_weights(q.view(), &p).unwrap();
        assert!(w[[1, 4]] >= 1.0 - 1e-12);
    }

    fn scene_map(c: usize) -> BevFeatureMap {
        let g = Georef::centered(12, 12, 0.5);
        let data = (0..12 * 12 * c).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        BevFeatureMap::new(12, 12, c, g, data).unwrap()
    }

    fn boxes() -> Vec<Box3D> {
        vec![
            Box3D::new(0.3, -0.2, 0.0, 2.0, 1.2, 1.0, 0.4).unwrap(),
            Box3D::new(-1.0, 1.1, 0.0, 1.5, 1.5, 1.0, -2.0).unwrap(),
            Box3D::new(1.2, 1.4, 0.0, 3.0, 1.0, 1.0, 3.0).unwrap(),
        ]
    }

    fn queries(n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |(i, k)| ((i * 31 + k * 17) % 13) as f64 / 6.0 - 1.0)
    }

    #[test]
    fn zero_offsets_match_box_attention() {
        let mut p = params(8, 5, 4, 3);
        p.offset_proj = Linear::zeros(8, 4 * 25 * 2);
        let map = scene_map(8);
        let q = queries(3, 8);
        let a = dga_forward(q.view(), &boxes(), &map, &p).unwrap();
        let b = box_attention_forward(q.view(), &boxes(), &map, &p).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let p = with_identity_projections(params(8, 3, 2, 4));
        let map = BevFeatureMap::new(10, 10, 8, Georef::centered(10, 10, 1.0), vec![0.75; 800]).unwrap();
        let small = vec![Box3D::new(0.2, 0.1, 0.0, 2.0, 1.0, 1.0, 0.3).unwrap(); 2];
        let out = dga_forward(queries(2, 8).view(), &small, &map, &p).unwrap();
        assert!(out.iter().all(|v| (v - 0.75).abs() < 1e-12), "{out:?}");
    }

    #[test]
    fn single_grid_point_samples_center() {
        let mut p = params(8, 1, 2, 5);
        p.offset_proj = Linear::zeros(8, 2 * 2);
        let map = scene_map(8);
        let b = boxes();
        let out = dga_forward(queries(3, 8).view(), &b, &map, &p).unwrap();
        for (i, bx) in b.iter().enumerate() {
            let f = map.bilinear_sample(map.world_to_feature(bx.x(), bx.y())).unwrap();
            let v = p.value_proj.forward_vec(ArrayView1::from(&f[..])).unwrap();
            let expected = p.output_proj.forward_vec(v.view()).unwrap();
            assert!((&out.row(i) - &expected).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn missing_boxes_and_shape_errors() {
        let p = params(8, 2, 2, 6);
        let map = scene_map(8);
        assert!(dga_forward(queries(3, 8).view(), &boxes()[..2], &map, &p).is_err());
        assert!(dga_forward(queries(3, 4).view(), &boxes(), &map, &p).is_err());
        assert!(dga_forward(queries(3, 8).view(), &boxes(), &scene_map(4), &p).is_err());
    }
}
