use proptest::prelude::*;
use whiskers::fixtures::{benchmark_map, conjugacy_fixture, ToyField};
use whiskers::error::Error;
use whiskers::verify::{fit_error_orders_auto, FitOptions};
use whiskers::{invariance_error, iterate_map, solve_to_order, Domain, EngineOptions};

#[test]
fn benchmark_error_vanishes_to_declared_order() {
    let model = benchmark_map(24);
    for j in 1..=6 {
        let (sol, e) = solve_to_order(&model, j, &EngineOptions::default()).unwrap();
        let again = invariance_error(&model, &sol).unwrap();
        assert_eq!(e, again);
        let (ox, oy, ot) = e.declared_order;
        assert!(e.x.min_degree(1e-12).is_none_or(|d| d >= ox));
        assert!(e.y[0].min_degree(1e-12).is_none_or(|d| d >= oy));
        assert!(e.theta[0].min_degree(1e-12).is_none_or(|d| d >= ot));
    }
}

#[test]
fn exact_components_report_rounding_floor() {
    let toy = ToyField::default();
    let map = toy.time_one_map(9, 8).unwrap();
    let opts = EngineOptions {
        prescribed_x: ToyField::prescribed_map_terms(9),
        ..EngineOptions::default()
    };
    let (sol, _) = solve_to_order(&map, 5, &opts).unwrap();
    let err = fit_error_orders_auto(&map, &sol, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::WindowTooWide { .. }), "{err}");
}

#[test]
fn auto_window_fit_on_benchmark() {
    let model = benchmark_map(24);
    let (sol, _) = solve_to_order(&model, 4, &EngineOptions::default()).unwrap();
    let rep = fit_error_orders_auto(&model, &sol, &FitOptions::window(1e-4, 1e-2)).unwrap();
    assert!(rep.pass(), "{:?}", rep.components);
}

#[test]
fn manifold_orbit_tracks_reduced_dynamics() {
    let model = benchmark_map(24);
    let (sol, _) = solve_to_order(&model, 6, &EngineOptions::default()).unwrap();
    let x0 = 0.01;
    let theta0 = 0.2;
    let (kx, ky, kt) = sol.k.evaluate(x0, &[theta0]);
    let state = [kx.re, ky[0].re, theta0 + kt[0].re];
    let orbit = iterate_map(&model, &state, 50, Some(&Domain { rho: 0.5, nonnegative_x: true })).unwrap();
    let mut x = x0;
    let mut theta = theta0;
    for s in orbit.samples.iter().skip(1) {
        x = sol.reduced.step_complex(x.into()).re;
        theta += model.freq.omega[0];
        let (kx, ky, _) = sol.k.evaluate(x, &[theta]);
        assert!((s.state[0] - kx.re).abs() < 1e-12 * 50.0);
        assert!((s.state[1] - ky[0].re).abs() < 1e-12 * 50.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn b_survives_random_conjugation(seed in 0u64..10_000, b0 in -2.0f64..2.0) {
        let m = conjugacy_fixture(b0, seed, 6, 16).unwrap();
        let (sol, _) = solve_to_order(&m, 2, &EngineOptions::default()).unwrap();
        prop_assert!((sol.b().unwrap() - b0).abs() < 1e-9);
    }

    #[test]
    fn free_choice_does_not_change_b(c in -1.0f64..1.0) {
        let model = benchmark_map(16);
        let mut opts = EngineOptions::default();
        opts.choices.kbar_x_n = c;
        let (s0, _) = solve_to_order(&model, 3, &EngineOptions::default()).unwrap();
        let (s1, _) = solve_to_order(&model, 3, &opts).unwrap();
        prop_assert!((s0.b().unwrap() - s1.b().unwrap()).abs() < 1e-12);
        prop_assert!((s1.kbar_x(2) - c).abs() < 1e-15);
    }
}
