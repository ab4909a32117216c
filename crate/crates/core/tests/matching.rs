use ndarray::Array2;
use proptest::prelude::*;
use seed_head::matcher::{assignment_cost, brute_force_assignment, hungarian_solve};

fn matrix(n: usize, g: usize, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((n, g), values[..n * g].to_vec()).unwrap()
}

prop_compose! {
    fn cost()(n in 1usize..7)(g in 1..=n, n in Just(n), v in prop::collection::vec(-5.0..5.0f64, 49)) -> Array2<f64> {
        matrix(n, g, &v)
    }
}

proptest! {
    #[test]
    fn solver_matches_enumeration(c in cost()) {
        let h = hungarian_solve(c.view()).unwrap();
        let b = brute_force_assignment(c.view()).unwrap();
        prop_assert!((h.total_cost - b.total_cost).abs() <= 1e-9);
        prop_assert_eq!(&h.pairs, &b.pairs);
        prop_assert_eq!(h.total_cost, assignment_cost(c.view(), &h.pairs));
        let mut queries: Vec<usize> = h.pairs.iter().map(|p| p.0).collect();
        queries.sort_unstable();
        queries.dedup();
        prop_assert_eq!(queries.len(), c.ncols());
    }

    #[test]
    fn column_shift_keeps_pairs(c in cost(), col in any::<prop::sample::Index>(), shift in -10.0..10.0f64) {
        let j = col.index(c.ncols());
        let mut shifted = c.clone();
        shifted.column_mut(j).mapv_inplace(|v| v + shift);
        prop_assert_eq!(hungarian_solve(c.view()).unwrap().pairs, hungarian_solve(shifted.view()).unwrap().pairs);
    }

    #[test]
    fn row_shift_keeps_pairs_when_square(n in 1usize..7, v in prop::collection::vec(-5.0..5.0f64, 49),
                                        row in any::<prop::sample::Index>(), shift in -10.0..10.0f64) {
        let c = matrix(n, n, &v);
        let i = row.index(n);
        let mut shifted = c.clone();
        shifted.row_mut(i).mapv_inplace(|x| x + shift);
        prop_assert_eq!(hungarian_solve(c.view()).unwrap().pairs, hungarian_solve(shifted.view()).unwrap().pairs);
    }

    #[test]
    fn positive_scaling_keeps_pairs(c in cost(), scale in 0.01..100.0f64) {
        let scaled = c.mapv(|v| v * scale);
        prop_assert_eq!(hungarian_solve(c.view()).unwrap().pairs, hungarian_solve(scaled.view()).unwrap().pairs);
    }
}

#[test]
fn larger_instances_agree_with_brute_force() {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..20 {
        let c = Array2::from_shape_fn((9, 8), |_| (next() * 20.0).floor() / 4.0);
        let h = hungarian_solve(c.view()).unwrap();
        let b = brute_force_assignment(c.view()).unwrap();
        assert_eq!(h, b);
    }
}
