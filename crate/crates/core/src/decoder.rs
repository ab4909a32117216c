// SPDX-License-Identifier: Apache-2.0

//! Decoder layer (self-attention → deformable grid attention → FFN, each
//! post-normalized) with prediction heads and iterative box refinement.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use crate::bev::{sinusoid_into, BevFeatureMap};
use crate::boxgeom::{Box3D, SceneExtent};
use crate::dga::{dga_forward_traced, DgaParams, DgaTrace};
use crate::dqs::QuerySet;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_in_place, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;

pub const DEFAULT_LAYERS: usize = 6;
/// Length of a box residual: Δx, Δy, Δz, Δlog l, Δlog w, Δlog h, Δsin θ, Δcos θ.
pub const BOX_DELTA_DIM: usize = 8;
/// Refined extents are kept within this range (meters).
pub const MIN_BOX_SIZE: f64 = 1e-4;
pub const MAX_BOX_SIZE: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams {
    heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl SelfAttentionParams {
    pub fn new(heads: usize, query: Linear, key: Linear, value: Linear, output: Linear) -> Result<Self> {
        let c = query.input_dim();
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {c} not divisible by {heads} heads"
            )));
        }
        for (what, l) in [("query", &query), ("key", &key), ("value", &value), ("output", &output)] {
            if l.input_dim() != c || l.output_dim() != c {
                return Err(Error::shape(format!("self-attention {what} projection"), c, l.output_dim()));
            }
        }
        Ok(SelfAttentionParams {
            heads,
            query,
            key,
            value,
            output,
        })
    }

    pub fn from_store(store: &mut ParamStore, prefix: &str, channels: usize, heads: usize) -> Result<Self> {
        Self::new(
            heads,
            Linear::from_store(store, &format!("{prefix}.query"), channels, channels)?,
            Linear::from_store(store, &format!("{prefix}.key"), channels, channels)?,
            Linear::from_store(store, &format!("{prefix}.value"), channels, channels)?,
            Linear::from_store(store, &format!("{prefix}.output"), channels, channels)?,
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Sinusoidal code of BEV centers: first half encodes x, second half y.
pub fn center_embedding(centers: &[[f64; 2]], channels: usize) -> Array2<f64> {
    let half = channels / 2;
    let mut pe = Array2::zeros((centers.len(), channels));
    let mut buf = vec![0.0; half];
    for (i, c) in centers.iter().enumerate() {
        let mut row = pe.row_mut(i);
        sinusoid_into(c[0], &mut buf);
        row.slice_mut(s![..half]).assign(&ArrayView1::from(&buf[..]));
        sinusoid_into(c[1], &mut buf);
        row.slice_mut(s![half..2 * half]).assign(&ArrayView1::from(&buf[..]));
    }
    pe
}

/// Multi-head scaled dot-product attention among queries; center codes are
/// added to the query/key inputs only.
pub fn self_attention(
    features: ArrayView2<f64>,
    centers: &[[f64; 2]],
    params: &SelfAttentionParams,
) -> Result<Array2<f64>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("self-attention over zero queries".into()));
    }
    if centers.len() != n {
        return Err(Error::shape("query centers", n, centers.len()));
    }
    let c = params.query.input_dim();
    if features.ncols() != c {
        return Err(Error::shape("query channels", c, features.ncols()));
    }
    let positioned = &features + &center_embedding(centers, c);
    let q = params.query.forward(positioned.view())?;
    let k = params.key.forward(positioned.view())?;
    let v = params.value.forward(features)?;

    let dh = c / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = Array2::zeros((n, c));
    for m in 0..params.heads {
        let cols = s![.., m * dh..(m + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for mut row in scores.axis_iter_mut(Axis(0)) {
            softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
        }
        mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    params.output.forward(mixed.view())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: SelfAttentionParams,
    pub dga: DgaParams,
    pub ffn: Mlp,
    pub norm_attn: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub cls_head: Mlp,
    pub loc_head: Mlp,
    pub box_head: Mlp,
}

/// Shape knobs for building a decoder layer from a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub channels: usize,
    pub heads: usize,
    pub grid: usize,
    pub dga_heads: usize,
    pub ffn_hidden: usize,
}

impl LayerShape {
    pub fn new(channels: usize) -> Self {
        LayerShape {
            channels,
            heads: crate::dga::DEFAULT_HEADS,
            grid: crate::dga::DEFAULT_GRID,
            dga_heads: crate::dga::DEFAULT_HEADS,
            ffn_hidden: 4 * channels,
        }
    }
}

impl DecoderLayerParams {
    /// Tensors are named `{prefix}.self_attn.*`, `{prefix}.dga.*`, `{prefix}.ffn.*`,
    /// `{prefix}.norm{1,2,3}.*` and `{prefix}.{cls,loc,box}_head.*`.
    pub fn from_store(store: &mut ParamStore, prefix: &str, shape: LayerShape) -> Result<Self> {
        let c = shape.channels;
        Ok(DecoderLayerParams {
            self_attn: SelfAttentionParams::from_store(store, &format!("{prefix}.self_attn"), c, shape.heads)?,
            dga: DgaParams::from_store(store, &format!("{prefix}.dga"), c, shape.grid, shape.dga_heads)?,
            ffn: Mlp::from_store(store, &format!("{prefix}.ffn"), c, shape.ffn_hidden, c)?,
            norm_attn: LayerNorm::from_store(store, &format!("{prefix}.norm1"), c)?,
            norm_cross: LayerNorm::from_store(store, &format!("{prefix}.norm2"), c)?,
            norm_ffn: LayerNorm::from_store(store, &format!("{prefix}.norm3"), c)?,
            cls_head: Mlp::from_store(store, &format!("{prefix}.cls_head"), c, c, 1)?,
            loc_head: Mlp::from_store(store, &format!("{prefix}.loc_head"), c, c, 1)?,
            box_head: Mlp::from_store(store, &format!("{prefix}.box_head"), c, c, BOX_DELTA_DIM)?,
        })
    }
}

/// Per-layer predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub s_c: Vec<f64>,
    pub s_l: Vec<f64>,
    /// `N × 8` box residuals.
    pub box_delta: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub queries: QuerySet,
    pub heads: HeadOutputs,
    pub attention: Vec<DgaTrace>,
}

/// Applies a box residual: centers move by `Δ·extent`, extents scale by `exp(Δlog)`,
/// and the heading follows the updated `(cos θ + Δcos, sin θ + Δsin)` direction.
pub fn refine_box(b: &Box3D, delta: &[f64], extent: &SceneExtent) -> Result<Box3D> {
    if delta.len() != BOX_DELTA_DIM {
        return Err(Error::shape("box residual", BOX_DELTA_DIM, delta.len()));
    }
    let size = |v: f64, d: f64| {
        let s = v * d.exp();
        if (MIN_BOX_SIZE..=MAX_BOX_SIZE).contains(&s) {
            s
        } else if s.is_nan() {
            v
        } else {
            s.clamp(MIN_BOX_SIZE, MAX_BOX_SIZE)
        }
    };
    let theta = if delta[6] == 0.0 && delta[7] == 0.0 {
        b.theta()
    } else {
        let (sin, cos) = b.theta().sin_cos();
        let (ns, nc) = (sin + delta[6], cos + delta[7]);
        if ns == 0.0 && nc == 0.0 {
            b.theta()
        } else {
            ns.atan2(nc)
        }
    };
    Box3D::new(
        b.x() + delta[0] * extent.x,
        b.y() + delta[1] * extent.y,
        b.z() + delta[2] * extent.z,
        size(b.l(), delta[3]),
        size(b.w(), delta[4]),
        size(b.h(), delta[5]),
        theta,
    )
}

/// One decoder layer: interaction, prediction heads and box refinement.
pub fn layer_forward(
    queries: &QuerySet,
    map: &BevFeatureMap,
    params: &DecoderLayerParams,
    extent: &SceneExtent,
) -> Result<LayerOutput> {
    let boxes = queries.boxes_required()?;
    let centers: Vec<[f64; 2]> = boxes.iter().map(Box3D::center_bev).collect();
    let x = queries.features.view();

    let attn = self_attention(x, &centers, &params.self_attn)?;
    let x1 = params.norm_attn.forward((&x + &attn).view())?;
    let (cross, attention) = dga_forward_traced(x1.view(), boxes, map, &params.dga)?;
    let x2 = params.norm_cross.forward((&x1 + &cross).view())?;
    let ffn = params.ffn.forward(x2.view())?;
    let x3 = params.norm_ffn.forward((&x2 + &ffn).view())?;

    let s_c: Vec<f64> = params.cls_head.forward(x3.view())?.column(0).iter().map(|&v| sigmoid(v)).collect();
    let s_l: Vec<f64> = params.loc_head.forward(x3.view())?.column(0).iter().map(|&v| sigmoid(v)).collect();
    let box_delta = params.box_head.forward(x3.view())?;
    if box_delta.ncols() != BOX_DELTA_DIM {
        return Err(Error::shape("box head output", BOX_DELTA_DIM, box_delta.ncols()));
    }
    let refined = boxes
        .iter()
        .zip(box_delta.axis_iter(Axis(0)))
        .map(|(b, d)| refine_box(b, d.as_slice().expect("owned rows are contiguous"), extent))
        .collect::<Result<Vec<_>>>()?;

    let mut next = QuerySet {
        features: x3,
        sources: queries.sources.clone(),
        boxes: Some(refined),
        scores: queries.scores.clone(),
    };
    next.scores.classification = Some(s_c.clone());
    next.scores.localization = Some(s_l.clone());
    next.scores.quality = None;
    next.scores.fused = None;
    Ok(LayerOutput {
        queries: next,
        heads: HeadOutputs { s_c, s_l, box_delta },
        attention,
    })
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// One entry per layer, in order; the last holds the final detections.
    pub layers: Vec<LayerOutput>,
}

impl DecoderOutput {
    pub fn final_queries(&self) -> &QuerySet {
        &self.layers.last().expect("decoder has at least one layer").queries
    }

    pub fn head_outputs(&self) -> impl Iterator<Item = &HeadOutputs> {
        self.layers.iter().map(|l| &l.heads)
    }
}

/// Runs the stack, each layer refining the previous layer's boxes.
pub fn decoder_forward(
    queries: &QuerySet,
    map: &BevFeatureMap,
    layers: &[DecoderLayerParams],
    extent: &SceneExtent,
) -> Result<DecoderOutput> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("decoder needs at least one layer".into()));
    }
    let mut outputs: Vec<LayerOutput> = Vec::with_capacity(layers.len());
    for params in layers {
        let input = outputs.last().map_or(queries, |o| &o.queries);
        let out = layer_forward(input, map, params, extent)?;
        outputs.push(out);
    }
    Ok(DecoderOutput { layers: outputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::Georef;
    use crate::dqs::QuerySource;
    use std::f64::consts::PI;

    const C: usize = 8;

    fn shape() -> LayerShape {
        LayerShape {
            channels: C,
            heads: 2,
            grid: 3,
            dga_heads: 2,
            ffn_hidden: 16,
        }
    }

    fn map() -> BevFeatureMap {
        let data = (0..10 * 10 * C).map(|i| ((i * 37) % 23) as f64 / 11.0 - 1.0).collect();
        BevFeatureMap::new(10, 10, C, Georef::centered(10, 10, 1.0), data).unwrap()
    }

    fn extent() -> SceneExtent {
        SceneExtent::new(10.0, 10.0, 4.0).unwrap()
    }

    fn query_set(n: usize) -> QuerySet {
        let features = Array2::from_shape_fn((n, C), |(i, k)| ((i * 5 + k * 3) % 7) as f64 / 3.0 - 1.0);
        let mut q = QuerySet::new(features, vec![QuerySource::Synthetic; n]).unwrap();
        q.boxes = Some(
            (0..n)
                .map(|i| Box3D::new(i as f64 - 2.0, 0.5 * i as f64 - 1.0, 0.0, 2.0, 1.0, 1.5, 0.3 * i as f64).unwrap())
                .collect(),
        );
        q
    }

    #[test]
    fn single_query_attention_is_value_then_output() {
        let p = SelfAttentionParams::from_store(&mut ParamStore::seeded(1), "sa", C, 2).unwrap();
        let x = Array2::from_shape_fn((1, C), |(_, k)| k as f64 * 0.1);
        let out = self_attention(x.view(), &[[3.0, -1.0]], &p).unwrap();
        let expected = p.output.forward(p.value.forward(x.view()).unwrap().view()).unwrap();
        assert!((&out - &expected).iter().all(|d| d.abs() < 1e-12));
        assert!(self_attention(Array2::zeros((0, C)).view(), &[], &p).is_err());
    }

    #[test]
    fn zero_qk_is_mean_of_values() {
        let mut p = SelfAttentionParams::from_store(&mut ParamStore::seeded(2), "sa", C, 2).unwrap();
        p.query = Linear::zeros(C, C);
        p.key = Linear::zeros(C, C);
        p.output = Linear::identity(C);
        let x = Array2::from_shape_fn((4, C), |(i, k)| (i * C + k) as f64 * 0.05);
        let centers = [[0.0, 0.0], [1.0, 2.0], [-3.0, 1.0], [4.0, 4.0]];
        let out = self_attention(x.view(), &centers, &p).unwrap();
        let values = p.value.forward(x.view()).unwrap();
        let mean = values.mean_axis(Axis(0)).unwrap();
        for row in out.axis_iter(Axis(0)) {
            assert!((&row - &mean).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn refine_zero_delta_is_identity() {
        let b = Box3D::new(1.25, -3.5, 0.7, 4.1, 1.9, 1.6, -2.9).unwrap();
        let r = refine_box(&b, &[0.0; 8], &extent()).unwrap();
        assert_eq!(r, b);
    }

    #[test]
    fn refine_keeps_boxes_valid() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let r = refine_box(&b, &[0.1, -0.1, 0.0, 800.0, -800.0, f64::NAN, 0.0, -2.0], &extent()).unwrap();
        assert_eq!(r.l(), MAX_BOX_SIZE);
        assert_eq!(r.w(), MIN_BOX_SIZE);
        assert_eq!(r.h(), 1.0);
        assert!((r.theta() - PI).abs() < 1e-12);
        assert!((r.x() - 1.0).abs() < 1e-12);
        assert!(refine_box(&b, &[0.0; 7], &extent()).is_err());
    }

    #[test]
    fn zero_heads_leave_boxes_fixed() {
        let mut store = ParamStore::seeded(3)
            .with_zeroed("l.cls_head")
            .with_zeroed("l.loc_head")
            .with_zeroed("l.box_head");
        let p = DecoderLayerParams::from_store(&mut store, "l", shape()).unwrap();
        let q = query_set(4);
        let out = layer_forward(&q, &map(), &p, &extent()).unwrap();
        assert_eq!(out.queries.boxes, q.boxes);
        assert!(out.heads.s_c.iter().chain(&out.heads.s_l).all(|v| *v == 0.5));
        assert!(out.heads.box_delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_queries_identical_rows() {
        let p = DecoderLayerParams::from_store(&mut ParamStore::seeded(4), "l", shape()).unwrap();
        let mut q = query_set(3);
        let row = q.features.row(0).to_owned();
        q.features.row_mut(2).assign(&row);
        let b0 = q.boxes.as_ref().unwrap()[0];
        q.boxes.as_mut().unwrap()[2] = b0;
        let out = layer_forward(&q, &map(), &p, &extent()).unwrap();
        assert_eq!(out.queries.features.row(0), out.queries.features.row(2));
        assert_eq!(out.heads.s_c[0], out.heads.s_c[2]);
        assert!(out.queries.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stack_of_one_equals_layer() {
        let p = DecoderLayerParams::from_store(&mut ParamStore::seeded(5), "l", shape()).unwrap();
        let q = query_set(3);
        let single = layer_forward(&q, &map(), &p, &extent()).unwrap();
        let stack = decoder_forward(&q, &map(), std::slice::from_ref(&p), &extent()).unwrap();
        assert_eq!(stack.layers.len(), 1);
        assert_eq!(stack.final_queries().features, single.queries.features);
        assert_eq!(stack.final_queries().boxes, single.queries.boxes);
        assert!(decoder_forward(&q, &map(), &[], &extent()).is_err());
    }

    #[test]
    fn missing_boxes_is_error() {
        let p = DecoderLayerParams::from_store(&mut ParamStore::seeded(6), "l", shape()).unwrap();
        let mut q = query_set(2);
        q.boxes = None;
        assert!(layer_forward(&q, &map(), &p, &extent()).is_err());
    }
}
