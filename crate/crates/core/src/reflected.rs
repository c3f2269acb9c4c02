//! Direct reflected scheme, its constraint diagnostics, and the value of a
//! fixed switching strategy.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, SwitchingCostMatrix};
use crate::paths::PathBundle;
use crate::regression::fit_masked;
use crate::solution::{backward_solve, check_bundle, mean_and_se, terminal_values, BackwardSolution, Scheme};
use crate::switching::Strategy;

const FIXED_POINT_TOL: f64 = 1e-12;

/// One Jacobi pass of `M[y]_i = max(y_i, max_{j≠i}(y_j − C_ij))`.
fn project_once(y: &[f64], out: &mut [f64], costs: &SwitchingCostMatrix) {
    let d = y.len();
    for i in 0..d {
        let mut best = y[i];
        for j in (0..d).filter(|&j| j != i) {
            let cand = y[j] - costs.get(i, j);
            if cand > best {
                best = cand;
            }
        }
        out[i] = best;
    }
}

/// Reflects `u` onto the closed domain in place, writing the upward moves
/// into `inc`. Returns the number of passes that changed the vector.
pub(crate) fn reflect_in_place(
    u: &mut [f64],
    inc: &mut [f64],
    costs: &SwitchingCostMatrix,
) -> Result<usize> {
    let d = u.len();
    let mut orig = [0.0; 8];
    let mut next = [0.0; 8];
    let (mut ov, mut nv);
    let (orig, next): (&mut [f64], &mut [f64]) = if d <= 8 {
        (&mut orig[..d], &mut next[..d])
    } else {
        ov = vec![0.0; d];
        nv = vec![0.0; d];
        (&mut ov, &mut nv)
    };
    orig.copy_from_slice(u);
    let mut changed = 0;
    for _ in 0..=d {
        project_once(u, next, costs);
        let delta = u
            .iter()
            .zip(next.iter())
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max);
        if delta <= FIXED_POINT_TOL {
            for i in 0..d {
                inc[i] = u[i] - orig[i];
            }
            return Ok(changed);
        }
        u.copy_from_slice(next);
        changed += 1;
    }
    Err(Error::ReflectionDiverged { passes: d + 1 })
}

/// Oblique reflection of `y`: returns the fixed point of `M` reached from
/// `y` and the non-negative per-mode increments.
pub fn reflect(y: &[f64], costs: &SwitchingCostMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let (v, inc, _) = reflect_counted(y, costs)?;
    Ok((v, inc))
}

/// Like [`reflect`], also returning how many passes changed the vector.
pub fn reflect_counted(y: &[f64], costs: &SwitchingCostMatrix) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if y.len() != costs.modes() {
        return Err(Error::Structural(format!(
            "vector of length {} against {} modes",
            y.len(),
            costs.modes()
        )));
    }
    let mut u = y.to_vec();
    let mut inc = vec![0.0; y.len()];
    let passes = reflect_in_place(&mut u, &mut inc, costs)?;
    Ok((u, inc, passes))
}

pub fn solve_reflected(bundle: &PathBundle, spec: &ProblemSpec, degree: usize) -> Result<BackwardSolution> {
    backward_solve(bundle, spec, Scheme::Reflected, degree)
}

/// Per-mode, per-step path average of `(Y_i − max_{j≠i}(Y_j − C_ij))⁺ ΔK_i`.
pub fn skorokhod_residual_by_step(sol: &BackwardSolution) -> Vec<Vec<f64>> {
    let d = sol.modes();
    let np = sol.n_paths() as f64;
    (0..d)
        .map(|i| {
            (0..=sol.grid.n_steps)
                .map(|k| {
                    let dk = sol.dk_step(i, k);
                    let mut s = 0.0;
                    for (p, &inc) in dk.iter().enumerate() {
                        if inc == 0.0 {
                            continue;
                        }
                        let obstacle = (0..d)
                            .filter(|&j| j != i)
                            .map(|j| sol.y(j, k, p) - sol.costs.get(i, j))
                            .fold(f64::NEG_INFINITY, f64::max);
                        let gap = sol.y(i, k, p) - obstacle;
                        if gap > 0.0 {
                            s += gap * inc;
                        }
                    }
                    s / np
                })
                .collect()
        })
        .collect()
}

/// Discrete Skorokhod integral, largest over modes; zero when `K` only
/// grows on the boundary.
pub fn skorokhod_residual(sol: &BackwardSolution) -> f64 {
    skorokhod_residual_by_step(sol)
        .into_iter()
        .map(|steps| steps.into_iter().sum::<f64>())
        .fold(0.0, f64::max)
}

/// Per-mode, per-step worst breach `max_{j,p} (Y_j − C_ij − Y_i)⁺`.
pub fn domain_violation_by_step(sol: &BackwardSolution) -> Vec<Vec<f64>> {
    let d = sol.modes();
    (0..d)
        .map(|i| {
            (0..=sol.grid.n_steps)
                .map(|k| {
                    let mut worst: f64 = 0.0;
                    for j in (0..d).filter(|&j| j != i) {
                        let c = sol.costs.get(i, j);
                        for (yi, yj) in sol.y_step(i, k).iter().zip(sol.y_step(j, k)) {
                            worst = worst.max(yj - c - yi);
                        }
                    }
                    worst
                })
                .collect()
        })
        .collect()
}

pub fn domain_violation(sol: &BackwardSolution) -> f64 {
    domain_violation_by_step(sol)
        .into_iter()
        .flatten()
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategyValue {
    pub u0: f64,
    pub se: f64,
}

/// Value at `t = 0` of following `strategy` on the bundle's paths: a
/// one-dimensional BSDE whose driver switches with the strategy, with the
/// switching costs subtracted when they are paid.
pub fn solve_strategy_bsde(
    bundle: &PathBundle,
    spec: &ProblemSpec,
    strategy: &Strategy,
    degree: usize,
) -> Result<StrategyValue> {
    check_bundle(bundle, spec)?;
    let np = bundle.n_paths();
    let grid = bundle.grid;
    let n = grid.n_steps;
    if strategy.n_paths() != np || strategy.n_steps != n {
        return Err(Error::Structural(format!(
            "strategy covers {} paths x {} steps, bundle has {} x {}",
            strategy.n_paths(),
            strategy.n_steps,
            np,
            n
        )));
    }
    let kappa = bundle.kappa();
    if let Some(p) = (0..np).find(|&p| strategy.switches[p].iter().any(|s| s.k >= kappa[p])) {
        return Err(Error::Structural(format!("strategy switches after the stopping time on path {p}")));
    }
    let d = spec.modes();
    let modes: Vec<Vec<usize>> = (0..np).into_par_iter().map(|p| strategy.mode_path(p)).collect();
    let cost_at = |p: usize, k: usize| strategy.cost_at(p, k, &spec.costs);

    // V_k: value right after the decision at step k.
    let mut v: Vec<f64> = {
        let tv: Vec<Vec<f64>> = (0..d).map(|i| terminal_values(bundle, spec, i)).collect::<Result<_>>()?;
        (0..np)
            .map(|p| {
                let last = if n == 0 { strategy.i0 } else { modes[p][n - 1] };
                tv[last][p]
            })
            .collect()
    };
    let mut w_next = vec![0.0; np];
    let mut w1 = Vec::new();
    for k in (0..n).rev() {
        let t = grid.time(k);
        for p in 0..np {
            let c = if k + 1 < kappa[p] { cost_at(p, k + 1) } else { 0.0 };
            w_next[p] = v[p] - c;
        }
        if k == 0 {
            w1 = w_next.clone();
        }
        let dw = bundle.dw_step(k);
        let mut new_v = w_next.clone();
        for m in 0..d {
            let mask: Vec<bool> = (0..np).map(|p| kappa[p] > k && modes[p][k] == m).collect();
            if !mask.iter().any(|&b| b) {
                continue;
            }
            let xs = bundle.x_step(m, k);
            let cf = fit_masked(&w_next, xs, Some(&mask), degree);
            let target: Vec<f64> = (0..np)
                .map(|p| {
                    if mask[p] {
                        (w_next[p] - cf.eval(xs[p])) * dw[p] / grid.dt
                    } else {
                        0.0
                    }
                })
                .collect();
            let zf = fit_masked(&target, xs, Some(&mask), degree);
            for p in (0..np).filter(|&p| mask[p]) {
                let c = cf.eval(xs[p]);
                let f = spec.driver()[m]
                    .eval(t, xs[p], c, zf.eval(xs[p]))
                    .map_err(|source| Error::Coefficient {
                        coefficient: "f",
                        mode: m + 1,
                        step: k,
                        path: p,
                        source,
                    })?;
                new_v[p] = c + f * grid.dt;
            }
        }
        v = new_v;
    }
    let u0: Vec<f64> = (0..np)
        .map(|p| if kappa[p] > 0 { v[p] - cost_at(p, 0) } else { v[p] })
        .collect();
    let (mean, _) = mean_and_se(&u0);
    let se = if w1.is_empty() { 0.0 } else { mean_and_se(&w1).1 };
    Ok(StrategyValue { u0: mean, se })
}
