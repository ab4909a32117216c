// SPDX-License-Identifier: Apache-2.0

//! Self-checks of the numerical kernels against independent oracles.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use seed_head::bev::{BevFeatureMap, FeatureCoord, Georef};
use seed_head::boxgeom::{bev_iou, grid_reference_points, Box3D, SceneExtent};
use seed_head::dga::{box_attention_forward, dga_forward, dga_query_with_offsets, offset_gradient, DgaParams};
use seed_head::matcher::{brute_force_assignment, cost_matrix_from_parts, hungarian_solve, CostWeights};
use seed_head::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Largest observed error, in the suite's own measure.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub trials: usize,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    trials: usize,
    failures: usize,
    max_error: f64,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tally {
            name,
            tolerance,
            trials: 0,
            failures: 0,
            max_error: 0.0,
        }
    }

    fn record(&mut self, error: f64, ok: bool) {
        self.trials += 1;
        if !ok || error.is_nan() {
            self.failures += 1;
        }
        if error > self.max_error || error.is_nan() {
            self.max_error = error;
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            trials: self.trials,
            failures: self.failures,
            max_error: self.max_error,
            tolerance: self.tolerance,
            passed: self.failures == 0 && self.trials > 0,
        }
    }
}

fn rng_for(seed: u64, suite: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ suite.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub const ASSIGNMENT_TOLERANCE: f64 = 1e-9;

/// Random `N × G` matrices (`1 ≤ G ≤ N ≤ 7`, entries in [−5, 5]): solver against
/// exhaustive search, cost and pairs. `fault` corrupts the solver's cost.
pub fn hungarian_suite(seed: u64, trials: usize, fault: bool) -> SuiteResult {
    let mut rng = rng_for(seed, 1);
    let mut t = Tally::new("hungarian_vs_brute_force", ASSIGNMENT_TOLERANCE);
    for _ in 0..trials {
        let n = rng.random_range(1..=7);
        let g = rng.random_range(1..=n);
        let cost = Array2::from_shape_fn((n, g), |_| rng.random_range(-5.0..=5.0));
        let mut h = hungarian_solve(cost.view()).expect("valid matrix");
        let b = brute_force_assignment(cost.view()).expect("valid matrix");
        if fault {
            h.total_cost += 1e-3;
        }
        let err = (h.total_cost - b.total_cost).abs();
        t.record(err, err <= ASSIGNMENT_TOLERANCE && h.pairs == b.pairs);
    }
    t.finish()
}

pub fn random_box(rng: &mut Xoshiro256PlusPlus, center: [f64; 2], spread: f64) -> Box3D {
    Box3D::new(
        center[0] + rng.random_range(-spread..=spread),
        center[1] + rng.random_range(-spread..=spread),
        rng.random_range(-1.0..=1.0),
        rng.random_range(0.5..=5.0),
        rng.random_range(0.5..=5.0),
        rng.random_range(0.5..=2.0),
        rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI),
    )
    .expect("positive sizes")
}

fn contains(b: &Box3D, p: [f64; 2]) -> bool {
    let (s, c) = b.theta().sin_cos();
    let dx = p[0] - b.x();
    let dy = p[1] - b.y();
    (c * dx + s * dy).abs() <= 0.5 * b.l() && (-s * dx + c * dy).abs() <= 0.5 * b.w()
}

/// BEV IoU estimated from `side²` jittered samples over the pair's bounding rectangle.
pub fn monte_carlo_bev_iou(a: &Box3D, b: &Box3D, side: usize, rng: &mut Xoshiro256PlusPlus) -> f64 {
    let r = |bx: &Box3D| 0.5 * bx.l().hypot(bx.w());
    let lo = [(a.x() - r(a)).min(b.x() - r(b)), (a.y() - r(a)).min(b.y() - r(b))];
    let hi = [(a.x() + r(a)).max(b.x() + r(b)), (a.y() + r(a)).max(b.y() + r(b))];
    let step = [(hi[0] - lo[0]) / side as f64, (hi[1] - lo[1]) / side as f64];
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let p = [
                lo[0] + (i as f64 + rng.random::<f64>()) * step[0],
                lo[1] + (j as f64 + rng.random::<f64>()) * step[1],
            ];
            let (ia, ib) = (contains(a, p), contains(b, p));
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub const IOU_MC_TOLERANCE: f64 = 3e-3;
/// Jitter grid side; 1000² = 10⁶ samples per pair.
pub const IOU_MC_SIDE: usize = 1000;

pub fn iou_suite(seed: u64, trials: usize) -> SuiteResult {
    let mut rng = rng_for(seed, 2);
    let mut t = Tally::new("bev_iou_vs_monte_carlo", IOU_MC_TOLERANCE);
    for _ in 0..trials {
        let a = random_box(&mut rng, [0.0, 0.0], 0.0);
        let b = random_box(&mut rng, [a.x(), a.y()], 3.0);
        let err = (bev_iou(&a, &b) - monte_carlo_bev_iou(&a, &b, IOU_MC_SIDE, &mut rng)).abs();
        t.record(err, err <= IOU_MC_TOLERANCE);
    }
    t.finish()
}

pub fn random_map(
    rng: &mut Xoshiro256PlusPlus,
    height: usize,
    width: usize,
    channels: usize,
    georef: Georef,
) -> BevFeatureMap {
    let data = (0..height * width * channels).map(|_| rng.random_range(-1.0..=1.0)).collect();
    BevFeatureMap::new(height, width, channels, georef, data).expect("consistent shape")
}

pub const JACOBIAN_REL_TOLERANCE: f64 = 1e-4;
pub const JACOBIAN_ABS_FLOOR: f64 = 1e-7;
pub const JACOBIAN_STEP: f64 = 1e-4;

fn within(analytic: f64, numeric: f64, rel: f64, floor: f64) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    let measure = diff / numeric.abs().max(floor / rel);
    (measure, diff <= floor || diff <= rel * numeric.abs())
}

/// Bilinear Jacobian against central differences at interior, off-lattice points.
pub fn jacobian_suite(seed: u64, trials: usize) -> SuiteResult {
    let mut rng = rng_for(seed, 3);
    let mut t = Tally::new("bilinear_jacobian_vs_finite_differences", JACOBIAN_REL_TOLERANCE);
    for _ in 0..trials {
        let (h, w) = (rng.random_range(3..=10), rng.random_range(3..=10));
        let channels = rng.random_range(1..=4);
        let map = random_map(&mut rng, h, w, channels, Georef::unit());
        let off_lattice = |rng: &mut Xoshiro256PlusPlus, n: usize| {
            rng.random_range(0..n - 1) as f64 + rng.random_range(0.01..0.99)
        };
        let rc = FeatureCoord::new(off_lattice(&mut rng, h), off_lattice(&mut rng, w));
        let jac = map.bilinear_sample_jacobian(rc).expect("finite point");
        let sample = |r: f64, c: f64| map.bilinear_sample(FeatureCoord::new(r, c)).expect("finite point");
        let s = JACOBIAN_STEP;
        let (rp, rm) = (sample(rc.row + s, rc.col), sample(rc.row - s, rc.col));
        let (cp, cm) = (sample(rc.row, rc.col + s), sample(rc.row, rc.col - s));
        let mut worst = 0.0_f64;
        let mut ok = !jac.non_smooth;
        for k in 0..map.channels() {
            for (analytic, numeric) in [
                (jac.d_row[k], (rp[k] - rm[k]) / (2.0 * s)),
                (jac.d_col[k], (cp[k] - cm[k]) / (2.0 * s)),
            ] {
                let (m, pass) = within(analytic, numeric, JACOBIAN_REL_TOLERANCE, JACOBIAN_ABS_FLOOR);
                worst = worst.max(m);
                ok &= pass;
            }
        }
        t.record(worst, ok);
    }
    t.finish()
}

/// A random DGA problem: params, map, boxes inside the map and query features.
pub struct DgaInstance {
    pub params: DgaParams,
    pub map: BevFeatureMap,
    pub boxes: Vec<Box3D>,
    pub features: Array2<f64>,
}

pub fn dga_instance(rng: &mut Xoshiro256PlusPlus, zero_offsets: bool) -> DgaInstance {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let channels = heads * rng.random_range(1..=4);
    let k = rng.random_range(1..=5);
    let mut store = ParamStore::seeded(rng.random());
    if zero_offsets {
        store = store.with_zeroed("dga.offset");
    }
    let params = DgaParams::from_store(&mut store, "dga", channels, k, heads).expect("consistent shapes");
    let (h, w) = (rng.random_range(4..=12), rng.random_range(4..=12));
    let cell = rng.random_range(0.5..=2.0);
    let map = random_map(rng, h, w, channels, Georef::centered(h, w, cell));
    let half = [0.5 * (w - 1) as f64 * cell, 0.5 * (h - 1) as f64 * cell];
    let n = rng.random_range(1..=5);
    let boxes = (0..n)
        .map(|_| {
            let c = [rng.random_range(-half[0]..=half[0]), rng.random_range(-half[1]..=half[1])];
            random_box(rng, c, 0.0)
        })
        .collect();
    let features = Array2::from_shape_fn((n, channels), |_| rng.random_range(-1.0..=1.0));
    DgaInstance {
        params,
        map,
        boxes,
        features,
    }
}

pub const DGA_EQUIVALENCE_TOLERANCE: f64 = 1e-12;

/// Zeroed offset projections: deformable attention against the undisplaced-grid path.
pub fn dga_zero_offset_suite(seed: u64, trials: usize) -> SuiteResult {
    let mut rng = rng_for(seed, 4);
    let mut t = Tally::new("dga_zero_offset_vs_box_attention", DGA_EQUIVALENCE_TOLERANCE);
    for _ in 0..trials {
        let inst = dga_instance(&mut rng, true);
        let a = dga_forward(inst.features.view(), &inst.boxes, &inst.map, &inst.params).expect("valid instance");
        let b = box_attention_forward(inst.features.view(), &inst.boxes, &inst.map, &inst.params)
            .expect("valid instance");
        let err = (&a - &b).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        t.record(err, err <= DGA_EQUIVALENCE_TOLERANCE);
    }
    t.finish()
}

pub const OFFSET_GRADIENT_STEP: f64 = 1e-6;
pub const OFFSET_GRADIENT_REL_TOLERANCE: f64 = 1e-5;
pub const OFFSET_GRADIENT_ABS_FLOOR: f64 = 1e-7;

/// Analytic output-vs-offset gradient against central differences. Components
/// whose perturbation crosses a lattice line are skipped.
pub fn offset_gradient_suite(seed: u64, trials: usize) -> SuiteResult {
    let mut rng = rng_for(seed, 5);
    let mut t = Tally::new("dga_offset_gradient_vs_finite_differences", OFFSET_GRADIENT_REL_TOLERANCE);
    for _ in 0..trials {
        let inst = dga_instance(&mut rng, false);
        let p = &inst.params;
        let q = inst.features.row(0);
        let b = &inst.boxes[0];
        let (m, kk) = (p.heads(), p.grid_points());
        let offsets = Array3::from_shape_fn((m, kk, 2), |_| rng.random_range(-0.3..=0.3));
        let channel = rng.random_range(0..p.channels());
        let grad = offset_gradient(q, b, &inst.map, p, &offsets, channel).expect("valid instance");
        let grid = grid_reference_points(b, p.k()).expect("k >= 1");
        let eval = |o: &Array3<f64>| dga_query_with_offsets(q, b, &inst.map, p, o).expect("valid instance")[channel];
        let cell_of = |x: f64, y: f64| {
            let rc = inst.map.world_to_feature(x, y);
            (rc.row.floor(), rc.col.floor())
        };
        let mut worst = 0.0_f64;
        let mut ok = true;
        for head in 0..m {
            for j in 0..kk {
                for axis in 0..2 {
                    let base = [grid[j][0] + offsets[[head, j, 0]], grid[j][1] + offsets[[head, j, 1]]];
                    let mut plus = base;
                    let mut minus = base;
                    plus[axis] += OFFSET_GRADIENT_STEP;
                    minus[axis] -= OFFSET_GRADIENT_STEP;
                    let on_lattice = |v: f64| (v - v.round()).abs() < 1e-9;
                    let rc = inst.map.world_to_feature(base[0], base[1]);
                    if cell_of(plus[0], plus[1]) != cell_of(minus[0], minus[1])
                        || on_lattice(rc.row)
                        || on_lattice(rc.col)
                    {
                        continue;
                    }
                    let mut op = offsets.clone();
                    let mut om = offsets.clone();
                    op[[head, j, axis]] += OFFSET_GRADIENT_STEP;
                    om[[head, j, axis]] -= OFFSET_GRADIENT_STEP;
                    let numeric = (eval(&op) - eval(&om)) / (2.0 * OFFSET_GRADIENT_STEP);
                    let (e, pass) = within(
                        grad[[head, j, axis]],
                        numeric,
                        OFFSET_GRADIENT_REL_TOLERANCE,
                        OFFSET_GRADIENT_ABS_FLOOR,
                    );
                    worst = worst.max(e);
                    ok &= pass;
                }
            }
        }
        t.record(worst, ok);
    }
    t.finish()
}

/// Random matching instance: query boxes, fused scores and ground truths.
pub fn matching_instance(rng: &mut Xoshiro256PlusPlus) -> (Vec<Box3D>, Vec<f64>, Vec<Box3D>) {
    let g = rng.random_range(1..=6);
    let n = rng.random_range(g..=12);
    let gts = (0..g).map(|_| random_box(rng, [0.0, 0.0], 20.0)).collect();
    let boxes = (0..n).map(|_| random_box(rng, [0.0, 0.0], 20.0)).collect();
    let scores = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    (boxes, scores, gts)
}

pub const MATCHING_EXTENT: SceneExtent = SceneExtent {
    x: 50.0,
    y: 50.0,
    z: 4.0,
};

/// Multiplying every λ by a random `c > 0` keeps the optimal pairs.
pub fn scaling_suite(seed: u64, trials: usize) -> SuiteResult {
    let mut rng = rng_for(seed, 6);
    let mut t = Tally::new("matching_lambda_scaling", 0.0);
    let w = CostWeights::default();
    for _ in 0..trials {
        let (boxes, scores, gts) = matching_instance(&mut rng);
        let c = 10f64.powf(rng.random_range(-2.0..=2.0));
        let base = cost_matrix_from_parts(&boxes, &scores, &gts, &w, &MATCHING_EXTENT).expect("valid instance");
        let scaled =
            cost_matrix_from_parts(&boxes, &scores, &gts, &w.scaled(c), &MATCHING_EXTENT).expect("valid instance");
        let a = hungarian_solve(base.view()).expect("N >= G");
        let b = hungarian_solve(scaled.view()).expect("N >= G");
        t.record(if a.pairs == b.pairs { 0.0 } else { 1.0 }, a.pairs == b.pairs);
    }
    t.finish()
}

/// Runs every suite with `trials` instances each.
pub fn check_oracles(seed: u64, trials: usize, fault: bool) -> OracleReport {
    let suites = vec![
        hungarian_suite(seed, trials, fault),
        iou_suite(seed, trials),
        jacobian_suite(seed, trials),
        dga_zero_offset_suite(seed, trials),
        offset_gradient_suite(seed, trials),
        scaling_suite(seed, trials),
    ];
    OracleReport {
        seed,
        trials,
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let r = check_oracles(7, 3, false);
        assert!(r.passed, "{r:#?}");
        assert_eq!(r.suites.len(), 6);
    }

    #[test]
    fn fault_is_detected() {
        let r = check_oracles(7, 2, true);
        assert!(!r.passed);
        assert!(!r.suites[0].passed);
    }

    #[test]
    fn monte_carlo_agrees_on_identical_boxes() {
        let mut rng = rng_for(0, 0);
        let b = Box3D::new(0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 0.7).unwrap();
        assert!((monte_carlo_bev_iou(&b, &b, 200, &mut rng) - 1.0).abs() < 1e-12);
    }
}
