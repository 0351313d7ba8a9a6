use gmm_sce::estimators::{effects_and_average, svt_rank};
use gmm_sce::inference::interval_from_draws;
use gmm_sce::linalg::{hac_lrv, in_convex_hull, project_simplex_euclidean, solve_simplex_qp, Bandwidth, SimplexQp};
use gmm_sce::panel::{read_long, read_wide, PanelData, RoleAssignment};
use gmm_sce::selection::{critical_value, mse_ordering};
use gmm_sce::simlab::{run_study, ArModel, FittedDGP, StudyDesign, StudyEstimator};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

fn vector(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    n.prop_flat_map(|k| prop::collection::vec(-10.0..10.0f64, k))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn on_simplex(w: &DVector<f64>) -> bool {
    w.iter().all(|&x| x >= 0.0) && (w.sum() - 1.0).abs() < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_feasible_idempotent_and_non_expansive(a in vector(1..=12), shift in -5.0..5.0f64) {
        let x = DVector::from_vec(a.clone());
        let y = x.map(|v| v * 0.5 + shift);
        let (px, py) = (project_simplex_euclidean(&x), project_simplex_euclidean(&y));
        prop_assert!(on_simplex(&px));
        prop_assert!((project_simplex_euclidean(&px) - &px).amax() < 1e-12);
        prop_assert!((px - py).norm() <= (x - y).norm() + 1e-12);
    }

    #[test]
    fn qp_solution_is_feasible_and_beats_random_points(
        (j, b, lin, probes) in (2..=8usize).prop_flat_map(|j| (
            Just(j),
            matrix(j + 1, j),
            prop::collection::vec(-2.0..2.0f64, j),
            prop::collection::vec(prop::collection::vec(0.0..1.0f64, j), 20),
        ))
    ) {
        let m = b.transpose() * &b;
        let q = SimplexQp::new(m, DVector::from_vec(lin), 0.0).unwrap();
        let sol = solve_simplex_qp(&q, 1e-10, 100_000).unwrap();
        let w = sol.weights.to_dvector();
        prop_assert_eq!(w.len(), j);
        prop_assert!(on_simplex(&w));
        prop_assert!(sol.kkt_residual <= 1e-10);
        for p in probes {
            let v = DVector::from_vec(p);
            let v = project_simplex_euclidean(&v);
            prop_assert!(sol.objective <= q.objective(&v) + 1e-9);
        }
    }

    #[test]
    fn hull_contains_convex_combinations(points in matrix(3, 6), raw in prop::collection::vec(0.01..1.0f64, 6)) {
        let w = DVector::from_vec(raw.clone()) / raw.iter().sum::<f64>();
        let target = &points * &w;
        let h = in_convex_hull(&target, &points, 1e-8).unwrap();
        prop_assert!(h.inside);
        prop_assert!((&points * h.weights.to_dvector() - target).norm() <= 1e-6);
    }

    #[test]
    fn hac_is_positive_semidefinite(x in matrix(3, 40), bw in 0..15usize) {
        let lrv = hac_lrv(&x, Bandwidth::Fixed(bw)).unwrap();
        let e = SymmetricEigen::new(lrv.matrix.clone()).eigenvalues;
        prop_assert!(e.min() >= -1e-10 * lrv.matrix.amax().max(1.0));
    }

    #[test]
    fn svt_rank_ignores_scale(v in prop::collection::vec(0.0..100.0f64, 1..30), e in -8..8i32) {
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        prop_assert_eq!(svt_rank(&v), svt_rank(&scaled));
        prop_assert!(svt_rank(&v) <= v.len());
    }

    #[test]
    fn critical_values_grow_with_df_and_confidence(j in 1..6usize, k in 1..12usize, a in 0.01..0.2f64) {
        prop_assert!(critical_value(j, k + 1, a) >= critical_value(j, k, a));
        prop_assert!(critical_value(j, k, a / 2.0) > critical_value(j, k, a));
    }

    #[test]
    fn intervals_nest_across_levels(mut d in prop::collection::vec(-5.0..5.0f64, 100..400), point in -3.0..3.0f64) {
        d.sort_by(f64::total_cmp);
        let (l10, u10) = interval_from_draws(point, &d, 0.10);
        let (l05, u05) = interval_from_draws(point, &d, 0.05);
        prop_assert!(l05 <= l10 && l10 <= u10 && u10 <= u05);
    }

    #[test]
    fn long_and_wide_round_trip(y in matrix(4, 7), first in prop::collection::vec(prop::option::of(0..7usize), 4)) {
        let d = DMatrix::from_fn(4, 7, |i, t| first[i].is_some_and(|f| t >= f));
        let ids = (0..4).map(|i| format!("unit{i}")).collect();
        let p = PanelData::with_integer_periods(ids, &[3, 5, 8, 13, 21, 34, 55], y, Some(d)).unwrap();
        let mut long = Vec::new();
        p.write_long(&mut long).unwrap();
        prop_assert_eq!(&read_long(long.as_slice()).unwrap(), &p);
        let (mut wide, mut side) = (Vec::new(), Vec::new());
        p.write_wide(&mut wide, &mut side).unwrap();
        prop_assert_eq!(&read_wide(wide.as_slice(), Some(side.as_slice())).unwrap(), &p);
    }

    #[test]
    fn effects_are_gaps_and_average_uses_v(y in matrix(4, 10), raw_w in prop::collection::vec(0.0..1.0f64, 3), raw_v in prop::collection::vec(0.01..1.0f64, 4)) {
        let ids = (0..4).map(|i| format!("u{i}")).collect();
        let periods: Vec<i64> = (1..=10).collect();
        let p = PanelData::with_integer_periods(ids, &periods, y, None).unwrap();
        let r = RoleAssignment::split_at(0, vec![1, 2, 3], vec![], 6, 10);
        let w = project_simplex_euclidean(&DVector::from_vec(raw_w));
        let v = DVector::from_vec(raw_v.clone()) / raw_v.iter().sum::<f64>();
        let fx = effects_and_average(&w, &p, &r, &v);
        for (k, &t) in r.post_periods.iter().enumerate() {
            let synth: f64 = (0..3).map(|j| w[j] * p.outcome(j + 1, t)).sum();
            prop_assert!((fx.effects[k] - (p.outcome(0, t) - synth)).abs() < 1e-12);
        }
        prop_assert!((fx.weighted_average - v.dot(&fx.effects)).abs() < 1e-12);
        prop_assert!((&fx.actual - &fx.synthetic - &fx.gap_series).amax() < 1e-12);
    }

    #[test]
    fn mse_ordering_is_a_sorted_permutation(y in matrix(6, 8)) {
        let ids = (0..6).map(|i| format!("u{i}")).collect();
        let periods: Vec<i64> = (1..=8).collect();
        let p = PanelData::with_integer_periods(ids, &periods, y, None).unwrap();
        let r = RoleAssignment::split_at(0, vec![1, 2, 3, 4, 5], vec![], 6, 8);
        let order = mse_ordering(&p, &r, &[5, 3, 1, 2, 4]);
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, vec![1, 2, 3, 4, 5]);
        let mse = |i: usize| (0..6).map(|t| (p.outcome(0, t) - p.outcome(i, t)).powi(2)).sum::<f64>();
        for w in order.windows(2) {
            prop_assert!(mse(w[0]) <= mse(w[1]));
        }
    }
}

#[test]
fn study_results_do_not_depend_on_thread_count() {
    let l = DMatrix::from_fn(2, 14, |f, i| 0.3 * f as f64 + ((i * 7 + f * 3) % 11) as f64 / 10.0);
    let dgp = FittedDGP::from_parts(
        None,
        l,
        vec![ArModel::ar(0.5, vec![0.5], 1.0), ArModel::white_noise(1.0, 1.0)],
        vec![0.5; 14],
    )
    .unwrap();
    let design = StudyDesign {
        t0: vec![12, 30],
        t1: 5,
        n0: vec![6],
        n1: 2,
        reps: 24,
        estimators: vec![StudyEstimator::Gmm, StudyEstimator::Ols, StudyEstimator::GmmSequential, StudyEstimator::Factor],
        detail: true,
        ..Default::default()
    };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let rep = pool.install(|| run_study(&dgp, &design, 5)).unwrap();
        serde_json::to_string(&rep).unwrap()
    };
    assert_eq!(run(1), run(4));
}
