//! End-to-end checks on the two-mode desk instance against independently
//! computed references.

use obsw_core::instances::desk2;
use obsw_core::oracle::DEFAULT_POLICY_BUDGET;
use obsw_core::*;

/// Standalone lattice recursion for the desk instance written out with
/// tilted probabilities instead of the driver's `z` term.
fn tilted_lattice(n: usize, cost: f64) -> [f64; 2] {
    let dt = 1.0 / n as f64;
    let h = 0.25 * dt.sqrt();
    let theta = [0.8, -0.8];
    let reward = [1.0, -1.0];
    let x = |k: usize, m: usize| 1.0 + h * (2.0 * m as f64 - k as f64);
    let mut v: Vec<[f64; 2]> = (0..=n).map(|m| [x(n, m); 2]).collect();
    for k in (0..n).rev() {
        v = (0..=k)
            .map(|m| {
                let mut u = [0.0; 2];
                for i in 0..2 {
                    let pu = 0.5 * (1.0 + theta[i] * dt.sqrt());
                    u[i] = pu * v[m + 1][i] + (1.0 - pu) * v[m][i] + reward[i] * x(k, m) * dt;
                }
                [u[0].max(u[1] - cost), u[1].max(u[0] - cost)]
            })
            .collect();
    }
    v[0]
}

/// Value of never switching out of mode 1 with linear coefficients:
/// `E[X_T] + Σ_k E[X_{t_k}] Δt` with `E[X_t] = 1 + 0.2 t`.
fn never_switch_closed_form(n: usize) -> f64 {
    let dt = 1.0 / n as f64;
    1.2 + (0..n).map(|k| (1.0 + 0.2 * k as f64 * dt) * dt).sum::<f64>()
}

#[test]
fn lattice_matches_standalone_recursion() {
    let spec = desk2();
    for n in [6, 10, 25] {
        let lat = dp_solve(&spec, n).unwrap();
        let oracle = tilted_lattice(n, 0.1);
        for i in 0..2 {
            assert!((lat.root()[i] - oracle[i]).abs() < 1e-12, "n={n} mode {i}");
        }
    }
    // Mode 1 never wants to leave on this horizon.
    let lat = dp_solve(&spec, 10).unwrap();
    assert!((lat.root()[0] - never_switch_closed_form(10)).abs() < 1e-12);
}

#[test]
fn lattice_permutation_invariance() {
    let spec = desk2();
    let swapped = spec.permuted(&[1, 0]);
    let a = dp_solve(&spec, 12).unwrap();
    let b = dp_solve(&swapped, 12).unwrap();
    for k in 0..=12 {
        for m in 0..=k {
            assert_eq!(a.value(0, k, m), b.value(1, k, m));
            assert_eq!(a.value(1, k, m), b.value(0, k, m));
        }
    }
}

#[test]
fn enumeration_agrees_with_dp_at_six_steps() {
    let spec = desk2();
    let e = enumerate_strategies(&spec, 6, DEFAULT_POLICY_BUDGET).unwrap();
    let dp = dp_solve(&spec, 6).unwrap();
    assert!((e.value - dp.root()[0]).abs() < 1e-10);
}

#[test]
fn free_switching_enumeration_matches_dp() {
    let spec = desk2()
        .with_costs(SwitchingCostMatrix::uniform(2, 0.0, false))
        .unwrap();
    let e = enumerate_strategies(&spec, 5, DEFAULT_POLICY_BUDGET).unwrap();
    let dp = dp_solve(&spec, 5).unwrap();
    assert!((e.value - dp.root()[0]).abs() < 1e-12);
    // With free switching every mode carries the same value.
    assert_eq!(dp.root()[0], dp.root()[1]);
    assert!((dp.root()[0] - tilted_lattice(5, 0.0)[0]).abs() < 1e-12);
}

#[test]
fn reflected_mc_close_to_lattice() {
    let spec = desk2();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let bundle = simulate_forward(&spec, &grid, 50_000, 17).unwrap();
    let sol = solve_reflected(&bundle, &spec, 2).unwrap();
    let dp = dp_solve(&spec, 10).unwrap().root();
    for i in 0..2 {
        assert!(((sol.y0[i] - dp[i]) / dp[i]).abs() < 0.02);
    }
    assert!(domain_violation(&sol) <= 1e-12);
    assert!(skorokhod_residual(&sol) <= 1e-10 * dp[0].abs());
}

#[test]
fn penalized_increases_towards_reflected() {
    let spec = desk2();
    let fine = simulate_forward(&spec, &TimeGrid::new(1.0, 80).unwrap(), 20_000, 5).unwrap();
    let refl = solve_reflected(&coarsen(&spec, &fine, 10).unwrap(), &spec, 2).unwrap();
    let mut prev: Option<BackwardSolution> = None;
    let mut distances = Vec::new();
    for n in [10u64, 20, 40] {
        let b = coarsen(&spec, &fine, 2 * n as usize).unwrap();
        let sol = solve_penalized(&b, &spec, n, 2).unwrap();
        let same_grid = solve_reflected(&b, &spec, 2).unwrap();
        for i in 0..2 {
            assert!(sol.y0[i] <= same_grid.y0[i] + 3.0 * same_grid.y0_se[i]);
            if let Some(p) = &prev {
                let tol = 3.0 * (sol.y0_se[i].powi(2) + p.y0_se[i].powi(2)).sqrt();
                assert!(sol.y0[i] >= p.y0[i] - tol, "mode {i} not nondecreasing at n={n}");
            }
        }
        for i in 0..2 {
            for k in 0..=sol.grid.n_steps {
                assert!(sol.dk_step(i, k).iter().all(|&v| v >= 0.0));
            }
        }
        distances.push(
            penalized::sup_distance(&sol, &refl, 0.0)
                .unwrap()
                .into_iter()
                .fold(0.0, f64::max),
        );
        prev = Some(sol);
    }
    assert!(distances[0] > distances[1] && distances[1] > distances[2]);
}

#[test]
fn penalty_violation_shrinks_with_n() {
    let spec = desk2();
    let fine = simulate_forward(&spec, &TimeGrid::new(1.0, 80).unwrap(), 10_000, 6).unwrap();
    let s10 = solve_penalized(&coarsen(&spec, &fine, 20).unwrap(), &spec, 10, 2).unwrap();
    let s40 = solve_penalized(&fine, &spec, 40, 2).unwrap();
    assert!(penalty_violation_norm(&s40, 0.0).sup <= penalty_violation_norm(&s10, 0.0).sup);
    assert!(domain_violation(&s40) < domain_violation(&s10));
    assert!(skorokhod_residual(&s40) <= skorokhod_residual(&s10));
}

#[test]
fn extracted_strategy_value_matches_field() {
    let spec = desk2();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let bundle = simulate_forward(&spec, &grid, 20_000, 23).unwrap();
    let sol = solve_reflected(&bundle, &spec, 2).unwrap();
    let strategy = extract_strategy(&sol, &bundle, 0, None).unwrap();
    let u = solve_strategy_bsde(&bundle, &spec, &strategy, 2).unwrap();
    assert!((u.u0 - sol.y0[0]).abs() <= 3.0 * (u.se.powi(2) + sol.y0_se[0].powi(2)).sqrt());
    // Admissibility: finite, bounded mean switching cost.
    let mean_cost: f64 = (0..bundle.n_paths())
        .map(|p| strategy.total_cost(p, &spec.costs))
        .sum::<f64>()
        / bundle.n_paths() as f64;
    assert!(mean_cost.is_finite() && mean_cost <= 0.1 * 10.0);
}

#[test]
fn immediate_switch_costs_exactly_c() {
    let spec = desk2();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let n = 5_000;
    let bundle = simulate_forward(&spec, &grid, n, 29).unwrap();
    let stay = solve_strategy_bsde(&bundle, &spec, &Strategy::never(n, 10, 1), 2).unwrap();
    let sw = Strategy::new(0, 10, vec![vec![Switch { k: 0, from: 0, to: 1 }]; n]).unwrap();
    let jump = solve_strategy_bsde(&bundle, &spec, &sw, 2).unwrap();
    assert!((jump.u0 - (stay.u0 - 0.1)).abs() < 1e-12);
}

#[test]
fn verification_inequality_for_alternative_strategies() {
    let spec = desk2();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let n = 20_000;
    let bundle = simulate_forward(&spec, &grid, n, 31).unwrap();
    let sol = solve_reflected(&bundle, &spec, 2).unwrap();
    let alternating: Vec<Vec<Switch>> = vec![
        (0..10)
            .map(|k| Switch { k, from: if k % 2 == 0 { 0 } else { 1 }, to: if k % 2 == 0 { 1 } else { 0 } })
            .collect();
        n
    ];
    let late: Vec<Vec<Switch>> = vec![vec![Switch { k: 5, from: 0, to: 1 }]; n];
    for s in [alternating, late] {
        let strategy = Strategy::new(0, 10, s).unwrap();
        let u = solve_strategy_bsde(&bundle, &spec, &strategy, 2).unwrap();
        assert!(u.u0 <= sol.y0[0] + 3.0 * (u.se.powi(2) + sol.y0_se[0].powi(2)).sqrt());
    }
}

#[test]
fn huge_costs_extract_no_switches() {
    let spec = desk2().with_costs(desk2().costs.scaled(1e6)).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let bundle = simulate_forward(&spec, &grid, 5_000, 3).unwrap();
    let sol = solve_reflected(&bundle, &spec, 2).unwrap();
    let s = extract_strategy(&sol, &bundle, 0, None).unwrap();
    assert!((0..5_000).all(|p| s.switch_count(p) == 0));
}

#[test]
fn free_switching_tracks_argmax() {
    let spec = desk2()
        .with_costs(SwitchingCostMatrix::uniform(2, 0.0, false))
        .unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let bundle = simulate_forward(&spec, &grid, 2_000, 3).unwrap();
    let sol = solve_reflected(&bundle, &spec, 2).unwrap();
    let s = extract_strategy(&sol, &bundle, 0, None).unwrap();
    for p in 0..2_000 {
        for (k, mode) in s.mode_path(p).into_iter().enumerate() {
            let best = sol.y(0, k, p).max(sol.y(1, k, p));
            assert!(sol.y(mode, k, p) >= best);
        }
    }
}

#[test]
fn profit_estimators_agree() {
    let spec = desk2();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let cd = estimate_profit(&spec, &Policy::NeverSwitch, &grid, 50_000, 11, Estimator::ControlledDrift).unwrap();
    let gs = estimate_profit(&spec, &Policy::NeverSwitch, &grid, 50_000, 12, Estimator::Girsanov).unwrap();
    assert!((cd.mean - gs.mean).abs() <= 3.0 * (cd.se.powi(2) + gs.se.powi(2)).sqrt());
    let (w, wse) = (gs.mean_weight.unwrap(), gs.weight_se.unwrap());
    assert!((w - 1.0).abs() <= 3.0 * wse);
    // Exact expectation of the never-switch payoff under the Euler scheme.
    assert!((cd.mean - never_switch_closed_form(10)).abs() <= 3.0 * cd.se);
}

#[test]
fn feedback_policy_beats_alternatives() {
    let spec = desk2();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let bundle = simulate_forward(&spec, &grid, 20_000, 41).unwrap();
    let sol = solve_reflected(&bundle, &spec, 2).unwrap();
    let alternatives = vec![
        ("self".to_string(), Policy::Feedback(FeedbackRule::optimal(&sol))),
        ("never".to_string(), Policy::NeverSwitch),
        ("always".to_string(), Policy::AlwaysSwitch),
        (
            "forced".to_string(),
            Policy::Feedback(FeedbackRule::perturbed(&sol, Perturbation::ForcedSwitchAt { k: 3, to: 1 })),
        ),
        (
            "eager".to_string(),
            Policy::Feedback(FeedbackRule::perturbed(&sol, Perturbation::ThresholdShift(0.3))),
        ),
        (
            "delayed".to_string(),
            Policy::Feedback(FeedbackRule::perturbed(&sol, Perturbation::Delay(2))),
        ),
    ];
    let report = policy_improvement_check(&spec, &sol, &grid, 20_000, 77, &alternatives).unwrap();
    assert!(report.all_pass(), "{report:?}");
    assert_eq!(report.rows[0].diff, 0.0);
    let always = &report.rows[2];
    assert!(-always.diff > always.tolerance);
}
