use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use seed_head::bev::{BevFeatureMap, Georef};
use seed_head::boxgeom::{Box3D, SceneExtent};
use seed_head::decoder::{decoder_forward, DecoderLayerParams, LayerShape};
use seed_head::dga::{dga_forward, dga_forward_traced, dga_query_with_offsets, offset_gradient, predict_weights, DgaParams};
use seed_head::dqs::{QuerySet, QuerySource};
use seed_head::params::ParamStore;

const C: usize = 8;

fn random_map(rng: &mut Xoshiro256PlusPlus, h: usize, w: usize, cell: f64) -> BevFeatureMap {
    let data = (0..h * w * C).map(|_| rng.random_range(-1.0..1.0)).collect();
    BevFeatureMap::new(h, w, C, Georef::centered(h, w, cell), data).unwrap()
}

fn random_boxes(rng: &mut Xoshiro256PlusPlus, n: usize, spread: f64) -> Vec<Box3D> {
    (0..n)
        .map(|_| {
            Box3D::new(
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..2.0),
                rng.random_range(-3.1..3.1),
            )
            .unwrap()
        })
        .collect()
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dga_rows_permute_with_queries(seed in any::<u64>(), n in 2usize..6, k in 1usize..5, shift in 1usize..5) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let map = random_map(&mut rng, 10, 12, 1.0);
        let boxes = random_boxes(&mut rng, n, 5.0);
        let features = Array2::from_shape_fn((n, C), |_| rng.random_range(-1.0..1.0));
        let p = DgaParams::from_store(&mut ParamStore::seeded(seed), "dga", C, k, 2).unwrap();
        let order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pf = features.select(ndarray::Axis(0), &order);
        let pb: Vec<Box3D> = order.iter().map(|&i| boxes[i]).collect();
        let a = dga_forward(features.view(), &boxes, &map, &p).unwrap();
        let b = dga_forward(pf.view(), &pb, &map, &p).unwrap();
        prop_assert!(max_diff(&a.select(ndarray::Axis(0), &order), &b) == 0.0);
    }

    #[test]
    fn dga_weights_are_convex_per_head(seed in any::<u64>(), k in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let p = DgaParams::from_store(&mut ParamStore::seeded(seed), "dga", C, k, heads).unwrap();
        let q = ndarray::Array1::from_shape_fn(C, |_| rng.random_range(-3.0..3.0));
        let w = predict_weights(q.view(), &p).unwrap();
        for row in w.rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offset_dga_ignores_far_cells(seed in any::<u64>(), k in 1usize..5) {
        // with no offsets, cells more than one cell away from the footprint cannot matter
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut map = random_map(&mut rng, 16, 16, 1.0);
        let b = Box3D::new(-3.0, 2.0, 0.0, 3.0, 2.0, 1.0, rng.random_range(-3.0..3.0)).unwrap();
        let p = DgaParams::from_store(&mut ParamStore::seeded(seed).with_zeroed("dga.offset"), "dga", C, k, 2).unwrap();
        let q = Array2::from_shape_fn((1, C), |_| rng.random_range(-1.0..1.0));
        let (before, traces) = dga_forward_traced(q.view(), &[b], &map, &p).unwrap();
        let reach = 0.5 * b.l().hypot(b.w()) + 1.5;
        for pos in &traces[0].positions {
            prop_assert!((pos[0] - b.x()).hypot(pos[1] - b.y()) <= 0.5 * b.l().hypot(b.w()) + 1e-9);
        }
        for row in 0..16 {
            for col in 0..16 {
                let (x, y) = map.feature_to_world(seed_head::bev::FeatureCoord::new(row as f64, col as f64));
                if (x - b.x()).hypot(y - b.y()) > reach {
                    map.cell_mut(row, col).iter_mut().for_each(|v| *v = 100.0);
                }
            }
        }
        let after = dga_forward(q.view(), &[b], &map, &p).unwrap();
        prop_assert!(max_diff(&before, &after) == 0.0);
    }

    #[test]
    fn offset_gradient_matches_differences(seed in any::<u64>(), k in 1usize..4, channel in 0usize..C) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let map = random_map(&mut rng, 12, 12, 0.8);
        let b = random_boxes(&mut rng, 1, 2.0)[0];
        let p = DgaParams::from_store(&mut ParamStore::seeded(seed), "dga", C, k, 2).unwrap();
        let q = ndarray::Array1::from_shape_fn(C, |_| rng.random_range(-1.0..1.0));
        let offsets = Array3::from_shape_fn((2, k * k, 2), |_| rng.random_range(-0.4..0.4));
        let grad = offset_gradient(q.view(), &b, &map, &p, &offsets, channel).unwrap();
        let grid = seed_head::boxgeom::grid_reference_points(&b, k).unwrap();
        let h = 1e-6;
        for idx in ndarray::indices_of(&offsets) {
            let (m, j, axis) = idx;
            let mut lo = [grid[j][0] + offsets[[m, j, 0]], grid[j][1] + offsets[[m, j, 1]]];
            let mut hi = lo;
            lo[axis] -= h;
            hi[axis] += h;
            let cell = |p: [f64; 2]| {
                let rc = map.world_to_feature(p[0], p[1]);
                (rc.row.floor(), rc.col.floor())
            };
            if cell(lo) != cell(hi) {
                continue;
            }
            let (mut op, mut om) = (offsets.clone(), offsets.clone());
            op[idx] += h;
            om[idx] -= h;
            let fd = (dga_query_with_offsets(q.view(), &b, &map, &p, &op).unwrap()[channel]
                - dga_query_with_offsets(q.view(), &b, &map, &p, &om).unwrap()[channel]) / (2.0 * h);
            prop_assert!((grad[idx] - fd).abs() <= 1e-7 + 1e-5 * fd.abs(), "{} vs {}", grad[idx], fd);
        }
    }
}

fn decoder_setup(seed: u64, layers: usize) -> (Vec<DecoderLayerParams>, BevFeatureMap, QuerySet, SceneExtent) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let map = random_map(&mut rng, 12, 12, 1.0);
    let mut store = ParamStore::seeded(seed);
    let shape = LayerShape { grid: 3, ..LayerShape::new(C) };
    let params = (0..layers)
        .map(|i| DecoderLayerParams::from_store(&mut store, &format!("decoder.{i}"), shape).unwrap())
        .collect();
    let n = 7;
    let features = Array2::from_shape_fn((n, C), |_| rng.random_range(-1.0..1.0));
    let mut set = QuerySet::new(features, vec![QuerySource::Synthetic; n]).unwrap();
    set.boxes = Some(random_boxes(&mut rng, n, 4.0));
    (params, map, set, SceneExtent::new(12.0, 12.0, 4.0).unwrap())
}

#[test]
fn decoder_is_permutation_equivariant() {
    for seed in 0..4 {
        let (params, map, set, ext) = decoder_setup(seed, 3);
        let order = [3, 0, 6, 1, 5, 2, 4];
        let permuted = set.select(&order);
        let a = decoder_forward(&set, &map, &params, &ext).unwrap();
        let b = decoder_forward(&permuted, &map, &params, &ext).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let fa = la.queries.features.select(ndarray::Axis(0), &order);
            assert!(max_diff(&fa, &lb.queries.features) <= 1e-9);
            for (i, &o) in order.iter().enumerate() {
                assert!((la.heads.s_c[o] - lb.heads.s_c[i]).abs() <= 1e-9);
                let (ba, bb) = (la.queries.boxes.as_ref().unwrap()[o], lb.queries.boxes.as_ref().unwrap()[i]);
                assert!((ba.x() - bb.x()).abs() <= 1e-9 && (ba.l() - bb.l()).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn decoder_is_deterministic() {
    let (params, map, set, ext) = decoder_setup(9, 2);
    let a = decoder_forward(&set, &map, &params, &ext).unwrap();
    let b = decoder_forward(&set, &map, &params, &ext).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert_eq!(la.queries, lb.queries);
        assert_eq!(la.attention, lb.attention);
    }
}

#[test]
fn decoder_boxes_stay_valid() {
    for seed in 0..6 {
        let (params, map, set, ext) = decoder_setup(100 + seed, 4);
        let out = decoder_forward(&set, &map, &params, &ext).unwrap();
        for layer in &out.layers {
            assert!(layer.queries.features.iter().all(|v| v.is_finite()));
            for b in layer.queries.boxes.as_ref().unwrap() {
                assert!(b.l() > 0.0 && b.w() > 0.0 && b.h() > 0.0);
                assert!(b.theta() > -std::f64::consts::PI && b.theta() <= std::f64::consts::PI);
            }
        }
    }
}
