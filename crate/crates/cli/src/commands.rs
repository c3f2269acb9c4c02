//! The five subcommands. Each returns a short human-readable summary; the
//! numeric results go to files in the output directory.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use obsw_core::oracle::DEFAULT_POLICY_BUDGET;
use obsw_core::reflected::{domain_violation_by_step, skorokhod_residual_by_step};
use obsw_core::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{in_module, oracle_error, CliError, Result};
use crate::output::{num, opt, GridInfo, OutputDir, Table};

/// One line per issue, `PASS` when there are none.
pub fn format_report(report: &ValidationReport) -> String {
    if report.is_valid() {
        return "PASS\n".into();
    }
    let mut s = String::new();
    for issue in &report.issues {
        let _ = writeln!(s, "FAIL {issue}");
    }
    s
}

/// Validates the problem document; on failure the itemised report is the
/// error's payload as well as the summary.
pub fn validate(cfg: &RunConfig) -> (ValidationReport, String) {
    let report = validate_document(&cfg.resolved.problem);
    let text = format_report(&report);
    (report, text)
}

fn checked_spec(cfg: &RunConfig) -> Result<ProblemSpec> {
    let (report, text) = validate(cfg);
    if !report.is_valid() {
        eprint!("{text}");
        return Err(CliError::Validation(report.issues.len()));
    }
    ProblemSpec::from_document(&cfg.resolved.problem).map_err(|e| CliError::Config(e.to_string()))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Largest simulated grid accepted before refusing a badly nested ladder.
const MAX_SIMULATED_STEPS: usize = 20_000;

pub fn solve(cfg: &RunConfig, dump_paths: Option<&Path>) -> Result<String> {
    let spec = checked_spec(cfg)?;
    let ex = &cfg.resolved.experiment;
    let (t, lambda, base) = (spec.horizon.t_cap, spec.horizon.lambda, spec.horizon.n_steps);
    let ladder: Vec<(u64, usize)> = ex.ladder.iter().map(|&n| (n, ex.ladder_steps(n, t))).collect();
    let fine = ladder.iter().fold(base, |acc, &(_, s)| lcm(acc, s));
    if fine > MAX_SIMULATED_STEPS {
        return Err(CliError::Config(format!(
            "ladder grids {:?} and base grid {base} only nest at {fine} steps",
            ladder.iter().map(|l| l.1).collect::<Vec<_>>()
        )));
    }
    let grid = TimeGrid::new(t, fine).map_err(in_module("paths"))?;
    let bundle = simulate_forward(&spec, &grid, ex.n_paths, ex.seed).map_err(in_module("paths"))?;
    if let Some(path) = dump_paths {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut w = BufWriter::new(file);
        bundle.write_dump(&mut w).map_err(in_module("paths"))?;
        w.flush().map_err(CliError::io(path))?;
    }

    let d = spec.modes();
    let mut out = OutputDir::create(&cfg.out)?;
    let mut values = Table::new(&["scheme", "n", "n_steps", "mode", "y0", "se", "reduced_fits"]);
    let mut summary = String::new();

    let refl = {
        let b = coarsen(&spec, &bundle, base).map_err(in_module("paths"))?;
        solve_reflected(&b, &spec, ex.degree).map_err(in_module("reflected"))?
    };
    for i in 0..d {
        values.push(vec![
            "reflected".into(),
            String::new(),
            base.to_string(),
            (i + 1).to_string(),
            num(refl.y0[i]),
            num(refl.y0_se[i]),
            refl.reduced_fits.to_string(),
        ]);
        let _ = writeln!(summary, "reflected  mode {}: Y0 = {:.6} (se {:.2e})", i + 1, refl.y0[i], refl.y0_se[i]);
    }

    let mut diagnostics = Table::new(&["k", "t", "mode", "mean_y", "mean_dk", "domain_violation", "skorokhod_residual"]);
    let dom = domain_violation_by_step(&refl);
    let sko = skorokhod_residual_by_step(&refl);
    let np = refl.n_paths() as f64;
    for k in 0..=base {
        for i in 0..d {
            diagnostics.push(vec![
                k.to_string(),
                num(refl.grid.time(k)),
                (i + 1).to_string(),
                num(refl.y_step(i, k).iter().sum::<f64>() / np),
                num(refl.dk_step(i, k).iter().sum::<f64>() / np),
                num(dom[i][k]),
                num(sko[i][k]),
            ]);
        }
    }
    let refl_domain = domain_violation(&refl);
    let refl_skorokhod = skorokhod_residual(&refl);
    drop(refl);

    let mut ladder_table = Table::new(&[
        "n",
        "n_steps",
        "n_dt",
        "cauchy_gap",
        "n_times_gap",
        "violation_sup",
        "violation_integrated",
        "domain_violation",
        "skorokhod_residual",
    ]);
    let mut prev: Option<(BackwardSolution, Vec<String>)> = None;
    let flush = |table: &mut Table, mut row: Vec<String>, gap: Option<f64>, n: u64| {
        row[3] = opt(gap);
        row[4] = opt(gap.map(|g| n as f64 * g));
        table.push(row);
    };
    for &(n, steps) in &ladder {
        let b = coarsen(&spec, &bundle, steps).map_err(in_module("paths"))?;
        let sol = solve_penalized(&b, &spec, n, ex.degree).map_err(in_module("penalized"))?;
        drop(b);
        for i in 0..d {
            values.push(vec![
                "penalized".into(),
                n.to_string(),
                steps.to_string(),
                (i + 1).to_string(),
                num(sol.y0[i]),
                num(sol.y0_se[i]),
                sol.reduced_fits.to_string(),
            ]);
        }
        let _ = writeln!(summary, "penalized n={n:<4} Y0 = {:?}", sol.y0.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>());
        let viol = penalty_violation_norm(&sol, lambda);
        let row = vec![
            n.to_string(),
            steps.to_string(),
            num(n as f64 * t / steps as f64),
            String::new(),
            String::new(),
            num(viol.sup),
            num(viol.integrated),
            num(domain_violation(&sol)),
            num(skorokhod_residual(&sol)),
        ];
        if let Some((p, prow)) = prev.take() {
            let gap = cauchy_gap(&p, &sol, lambda).map_err(in_module("penalized"))?;
            let pn = match p.scheme {
                Scheme::Penalized { n } => n,
                Scheme::Reflected => unreachable!(),
            };
            flush(&mut ladder_table, prow, Some(gap), pn);
        }
        prev = Some((sol, row));
    }
    if let Some((p, prow)) = prev {
        let pn = match p.scheme {
            Scheme::Penalized { n } => n,
            Scheme::Reflected => unreachable!(),
        };
        flush(&mut ladder_table, prow, None, pn);
    }
    let _ = writeln!(summary, "reflected domain violation {refl_domain:.3e}, skorokhod residual {refl_skorokhod:.3e}");

    out.table("values.csv", &values)?;
    out.table("ladder.csv", &ladder_table)?;
    out.table("diagnostics.csv", &diagnostics)?;
    out.finish(
        "solve",
        &cfg.resolved,
        GridInfo {
            t_cap: t,
            n_steps: base,
            simulated_steps: Some(fine),
        },
    )?;
    Ok(summary)
}

pub fn oracle(cfg: &RunConfig) -> Result<String> {
    let spec = checked_spec(cfg)?;
    let n = cfg.resolved.experiment.oracle_n;
    let lattice = dp_solve(&spec, n).map_err(oracle_error)?;
    let mut out = OutputDir::create(&cfg.out)?;
    let mut table = Table::new(&["method", "n", "mode", "value", "evaluated"]);
    let mut summary = String::new();
    for (i, v) in lattice.root().into_iter().enumerate() {
        table.push(vec!["lattice_dp".into(), n.to_string(), (i + 1).to_string(), num(v), String::new()]);
        let _ = writeln!(summary, "lattice DP  mode {}: {v:.10}", i + 1);
    }
    if n <= 6 {
        match enumerate_strategies(&spec, n, DEFAULT_POLICY_BUDGET) {
            Ok(e) => {
                table.push(vec![
                    "enumeration".into(),
                    n.to_string(),
                    (spec.i0 + 1).to_string(),
                    num(e.value),
                    e.evaluated.to_string(),
                ]);
                let _ = writeln!(summary, "enumeration mode {}: {:.10} over {} mode maps", spec.i0 + 1, e.value, e.evaluated);
            }
            Err(e @ Error::SearchSpace { .. }) => {
                let _ = writeln!(summary, "enumeration skipped: {e}");
            }
            Err(e) => return Err(oracle_error(e)),
        }
    }
    let mut nodes = Table::new(&["k", "m", "x", "mode", "value"]);
    for k in 0..=n {
        for m in 0..=k {
            for i in 0..spec.modes() {
                nodes.push(vec![
                    k.to_string(),
                    m.to_string(),
                    num(lattice.node_x(k, m)),
                    (i + 1).to_string(),
                    num(lattice.value(i, k, m)),
                ]);
            }
        }
    }
    out.table("oracle.csv", &table)?;
    out.table("lattice.csv", &nodes)?;
    out.finish(
        "oracle",
        &cfg.resolved,
        GridInfo {
            t_cap: spec.horizon.t_cap,
            n_steps: n,
            simulated_steps: None,
        },
    )?;
    Ok(summary)
}

struct CompareRow {
    quantity: &'static str,
    mode: usize,
    value: Option<f64>,
    se: Option<f64>,
    note: String,
}

pub fn compare(cfg: &RunConfig) -> Result<String> {
    let spec = checked_spec(cfg)?;
    let ex = &cfg.resolved.experiment;
    let (t, n) = (spec.horizon.t_cap, ex.oracle_n);
    let d = spec.modes();
    // Refusals surface before any Monte Carlo work.
    let lattice = dp_solve(&spec, n).map_err(oracle_error)?.root();
    let mut rows: Vec<CompareRow> = Vec::new();
    let grid = TimeGrid::new(t, n).map_err(in_module("paths"))?;
    let bundle = simulate_forward(&spec, &grid, ex.n_paths, ex.seed).map_err(in_module("paths"))?;
    let refl = solve_reflected(&bundle, &spec, ex.degree).map_err(in_module("reflected"))?;
    drop(bundle);
    for i in 0..d {
        rows.push(CompareRow {
            quantity: "reflected_mc",
            mode: i,
            value: Some(refl.y0[i]),
            se: Some(refl.y0_se[i]),
            note: format!("N={n}"),
        });
    }
    let n_max = *ex.ladder.last().expect("ladder checked non-empty");
    let steps = ex.ladder_steps(n_max, t);
    {
        let g = TimeGrid::new(t, steps).map_err(in_module("paths"))?;
        let b = simulate_forward(&spec, &g, ex.n_paths, ex.seed).map_err(in_module("paths"))?;
        let pen = solve_penalized(&b, &spec, n_max, ex.degree).map_err(in_module("penalized"))?;
        for i in 0..d {
            rows.push(CompareRow {
                quantity: "penalized_mc",
                mode: i,
                value: Some(pen.y0[i]),
                se: Some(pen.y0_se[i]),
                note: format!("n={n_max} N={steps}"),
            });
        }
    }
    for (i, &v) in lattice.iter().enumerate() {
        rows.push(CompareRow {
            quantity: "lattice_dp",
            mode: i,
            value: Some(v),
            se: None,
            note: format!("N={n}"),
        });
    }
    if n <= 6 {
        let (value, note) = match enumerate_strategies(&spec, n, DEFAULT_POLICY_BUDGET) {
            Ok(e) => (Some(e.value), format!("{} mode maps", e.evaluated)),
            Err(e @ Error::SearchSpace { .. }) => (None, format!("refused: {e}")),
            Err(e) => return Err(oracle_error(e)),
        };
        rows.push(CompareRow {
            quantity: "enumeration",
            mode: spec.i0,
            value,
            se: None,
            note,
        });
    }
    let policy = Policy::Feedback(FeedbackRule::optimal(&refl));
    for (quantity, estimator, offset) in [
        ("j_star_controlled_drift", Estimator::ControlledDrift, 1),
        ("j_star_girsanov", Estimator::Girsanov, 2),
    ] {
        let row = match estimate_profit(&spec, &policy, &grid, ex.n_paths, ex.seed.wrapping_add(offset), estimator) {
            Ok(est) => CompareRow {
                quantity,
                mode: spec.i0,
                value: Some(est.mean),
                se: Some(est.se),
                note: match (est.mean_weight, est.weight_se) {
                    (Some(w), Some(s)) => format!("mean weight {w:?} (se {s:?})"),
                    _ => String::new(),
                },
            },
            Err(e @ (Error::Specification(_) | Error::Unsupported(_))) => CompareRow {
                quantity,
                mode: spec.i0,
                value: None,
                se: None,
                note: format!("not available: {e}"),
            },
            Err(e) => return Err(in_module("switching")(e)),
        };
        rows.push(row);
    }

    let mut table = Table::new(&["quantity", "mode", "value", "se", "abs_diff_vs_dp", "rel_diff_vs_dp", "note"]);
    let mut summary = String::new();
    for r in &rows {
        let dp = lattice[r.mode];
        let abs = r.value.map(|v| (v - dp).abs());
        let rel = abs.map(|a| if dp != 0.0 { a / dp.abs() } else { a });
        table.push(vec![
            r.quantity.into(),
            (r.mode + 1).to_string(),
            opt(r.value),
            opt(r.se),
            opt(abs),
            opt(rel),
            r.note.clone(),
        ]);
        match r.value {
            Some(v) => {
                let _ = writeln!(summary, "{:<24} mode {}: {v:.6}  rel diff {:.2e}", r.quantity, r.mode + 1, rel.unwrap_or(0.0));
            }
            None => {
                let _ = writeln!(summary, "{:<24} mode {}: {}", r.quantity, r.mode + 1, r.note);
            }
        }
    }
    let mut out = OutputDir::create(&cfg.out)?;
    out.table("compare.csv", &table)?;
    out.finish(
        "compare",
        &cfg.resolved,
        GridInfo {
            t_cap: t,
            n_steps: n,
            simulated_steps: Some(n),
        },
    )?;
    Ok(summary)
}

/// Alternatives the extracted policy is checked against.
fn alternatives<'a>(sol: &'a BackwardSolution, spec: &ProblemSpec, seed: u64) -> Vec<(String, Policy<'a>)> {
    let mut alts = vec![("never_switch".to_string(), Policy::NeverSwitch)];
    let d = spec.modes();
    if d == 1 {
        return alts;
    }
    alts.push(("always_switch".into(), Policy::AlwaysSwitch));
    for (j, prob) in [0.02, 0.05, 0.1, 0.2, 0.4].into_iter().enumerate() {
        alts.push((
            format!("random_{}", j + 1),
            Policy::Feedback(FeedbackRule::perturbed(
                sol,
                Perturbation::RandomSwitch {
                    prob,
                    seed: seed.wrapping_add(1000 + j as u64),
                },
            )),
        ));
    }
    let min_cost = (0..d)
        .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| sol.costs.get(i, j))
        .fold(f64::INFINITY, f64::min);
    let shift = if min_cost > 0.0 { 0.5 * min_cost } else { 0.05 };
    alts.push(("delayed".into(), Policy::Feedback(FeedbackRule::perturbed(sol, Perturbation::Delay(1)))));
    alts.push((
        "threshold_shift".into(),
        Policy::Feedback(FeedbackRule::perturbed(sol, Perturbation::ThresholdShift(shift))),
    ));
    alts.push((
        "forced_switch".into(),
        Policy::Feedback(FeedbackRule::perturbed(
            sol,
            Perturbation::ForcedSwitchAt {
                k: sol.grid.n_steps / 2,
                to: (spec.i0 + 1) % d,
            },
        )),
    ));
    alts
}

pub fn policy(cfg: &RunConfig) -> Result<String> {
    let spec = checked_spec(cfg)?;
    let ex = &cfg.resolved.experiment;
    let estimator = ex.estimator()?;
    let grid = TimeGrid::from_horizon(&spec.horizon);
    let bundle = simulate_forward(&spec, &grid, ex.n_paths, ex.seed).map_err(in_module("paths"))?;
    let sol = solve_reflected(&bundle, &spec, ex.degree).map_err(in_module("reflected"))?;
    let strategy = extract_strategy(&sol, &bundle, spec.i0, None).map_err(in_module("switching"))?;
    let value = solve_strategy_bsde(&bundle, &spec, &strategy, ex.degree).map_err(in_module("reflected"))?;

    let mut jsonl = Vec::new();
    for (p, sw) in strategy.switches.iter().enumerate() {
        let switches: Vec<_> = sw
            .iter()
            .map(|s| json!({"step": s.k, "t": grid.time(s.k), "from": s.from + 1, "to": s.to + 1}))
            .collect();
        let line = json!({"path": p, "initial_mode": spec.i0 + 1, "switches": switches});
        serde_json::to_writer(&mut jsonl, &line).expect("in-memory write");
        jsonl.push(b'\n');
    }

    let fresh = ex.seed.wrapping_add(1);
    let jstar = estimate_profit(&spec, &Policy::Feedback(FeedbackRule::optimal(&sol)), &grid, ex.n_paths, fresh, estimator)
        .map_err(in_module("switching"))?;
    let alts = alternatives(&sol, &spec, ex.seed);
    let report = policy_improvement_check(&spec, &sol, &grid, ex.n_paths, fresh, &alts).map_err(in_module("switching"))?;

    let mut table = Table::new(&["policy", "estimate", "se", "diff_vs_optimal", "tolerance", "pass"]);
    table.push(vec!["field_y0".into(), num(sol.y0[spec.i0]), num(sol.y0_se[spec.i0]), String::new(), String::new(), String::new()]);
    table.push(vec!["extracted_on_bundle".into(), num(value.u0), num(value.se), String::new(), String::new(), String::new()]);
    table.push(vec![
        format!("optimal_{}", ex.estimator),
        num(jstar.mean),
        num(jstar.se),
        String::new(),
        String::new(),
        String::new(),
    ]);
    table.push(vec!["optimal".into(), num(report.optimal), num(report.optimal_se), "0.0".into(), String::new(), "true".into()]);
    for r in &report.rows {
        table.push(vec![r.name.clone(), num(r.estimate), num(r.se), num(r.diff), num(r.tolerance), r.pass.to_string()]);
    }
    let mut hist = Table::new(&["switches", "paths"]);
    for (c, count) in jstar.switch_histogram.iter().enumerate() {
        hist.push(vec![c.to_string(), count.to_string()]);
    }

    let mut out = OutputDir::create(&cfg.out)?;
    out.write("strategies.jsonl", &jsonl)?;
    out.table("policy.csv", &table)?;
    out.table("switch_histogram.csv", &hist)?;
    out.finish(
        "policy",
        &cfg.resolved,
        GridInfo {
            t_cap: grid.t_cap,
            n_steps: grid.n_steps,
            simulated_steps: Some(grid.n_steps),
        },
    )?;

    let mut summary = String::new();
    let _ = writeln!(summary, "Y0 = {:.6} (se {:.2e}), extracted strategy on bundle {:.6}", sol.y0[spec.i0], sol.y0_se[spec.i0], value.u0);
    let _ = writeln!(summary, "J(alpha*) = {:.6} (se {:.2e}), mean switches {:.3}", jstar.mean, jstar.se, jstar.mean_switches);
    for r in &report.rows {
        let _ = writeln!(summary, "{} {:<16} J = {:.6}  diff {:+.2e}  tol {:.2e}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.estimate, r.diff, r.tolerance);
    }
    if !report.all_pass() {
        let failed: Vec<_> = report.rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        eprint!("{summary}");
        return Err(CliError::Check(format!("policy improvement check failed for {}", failed.join(", "))));
    }
    Ok(summary)
}
