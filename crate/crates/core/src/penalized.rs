//! Penalized approximation of the reflected system and its convergence
//! diagnostics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, SwitchingCostMatrix};
use crate::paths::PathBundle;
use crate::solution::{backward_solve, BackwardSolution, Scheme};

#[inline]
fn neg_part(a: f64) -> f64 {
    if a < 0.0 {
        -a
    } else {
        0.0
    }
}

/// Adds `n Δt Σ_l (cont_i − cont_l + C_il)⁻` to each `u_i`, recording it
/// in `dk`. Components with no active penalty are left untouched.
pub(crate) fn add_penalty(
    cont: &[f64],
    u: &mut [f64],
    dk: &mut [f64],
    costs: &SwitchingCostMatrix,
    ndt: f64,
) {
    let d = cont.len();
    for i in 0..d {
        let mut s = 0.0;
        for l in (0..d).filter(|&l| l != i) {
            s += neg_part(cont[i] - cont[l] + costs.get(i, l));
        }
        let pen = ndt * s;
        if pen > 0.0 {
            u[i] += pen;
            dk[i] = pen;
        } else {
            dk[i] = 0.0;
        }
    }
}

/// One explicit penalized step at a single state. `x` holds each mode's
/// state. Returns the new values and the penalty increments.
#[allow(clippy::too_many_arguments)]
pub fn backward_step_penalized(
    cont: &[f64],
    z: &[f64],
    n_penalty: u64,
    dt: f64,
    t: f64,
    x: &[f64],
    spec: &ProblemSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ndt = n_penalty as f64 * dt;
    if ndt > 0.5 {
        return Err(Error::Parameter(format!("n*dt = {ndt} exceeds the stability bound 0.5")));
    }
    let d = spec.modes();
    if cont.len() != d || z.len() != d || x.len() != d {
        return Err(Error::Structural(format!("step inputs must have {d} modes")));
    }
    let mut u = vec![0.0; d];
    for i in 0..d {
        u[i] = cont[i] + spec.driver()[i].eval(t, x[i], cont[i], z[i])? * dt;
    }
    let mut dk = vec![0.0; d];
    add_penalty(cont, &mut u, &mut dk, &spec.costs, ndt);
    Ok((u, dk))
}

/// Regression-based backward induction of the penalized system.
pub fn solve_penalized(
    bundle: &PathBundle,
    spec: &ProblemSpec,
    n_penalty: u64,
    degree: usize,
) -> Result<BackwardSolution> {
    backward_solve(bundle, spec, Scheme::Penalized { n: n_penalty }, degree)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenaltyViolation {
    /// `max_{i,j,k}` of the path average of `e^{λ t_k} |(Y_i − Y_j + C_ij)⁻|²`.
    pub sup: f64,
    /// `n² Σ_k Δt` of the same path averages summed over pairs.
    pub integrated: f64,
}

pub fn penalty_violation_norm(sol: &BackwardSolution, lambda: f64) -> PenaltyViolation {
    let d = sol.modes();
    let np = sol.n_paths() as f64;
    let mut sup: f64 = 0.0;
    let mut integrated = 0.0;
    for k in 0..=sol.grid.n_steps {
        let w = (lambda * sol.grid.time(k)).exp();
        for i in 0..d {
            for j in (0..d).filter(|&j| j != i) {
                let c = sol.costs.get(i, j);
                let (yi, yj) = (sol.y_step(i, k), sol.y_step(j, k));
                let s: f64 = yi
                    .iter()
                    .zip(yj)
                    .map(|(a, b)| neg_part(a - b + c).powi(2))
                    .sum();
                let avg = w * s / np;
                sup = sup.max(avg);
                if k < sol.grid.n_steps {
                    integrated += avg * sol.grid.dt;
                }
            }
        }
    }
    let scale = match sol.scheme {
        Scheme::Penalized { n } => (n as f64).powi(2),
        Scheme::Reflected => 1.0,
    };
    PenaltyViolation {
        sup,
        integrated: integrated * scale,
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-mode `sup_t` of the path average of `e^{λt} |Y^a − Y^b|²` over the
/// times common to both grids. The solutions must come from the same
/// Brownian sample on nested grids.
pub fn sup_distance(a: &BackwardSolution, b: &BackwardSolution, lambda: f64) -> Result<Vec<f64>> {
    if a.bundle != b.bundle {
        return Err(Error::Structural(format!(
            "solutions come from different bundles ({:?} vs {:?})",
            a.bundle, b.bundle
        )));
    }
    if a.grid.t_cap != b.grid.t_cap || a.modes() != b.modes() {
        return Err(Error::Structural("solutions have different horizons or modes".into()));
    }
    let common = gcd(a.grid.n_steps, b.grid.n_steps);
    let (ra, rb) = (a.grid.n_steps / common, b.grid.n_steps / common);
    let np = a.n_paths() as f64;
    let mut out = vec![0.0f64; a.modes()];
    for j in 0..=common {
        let t = a.grid.time(j * ra);
        let w = (lambda * t).exp();
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = a
                .y_step(i, j * ra)
                .iter()
                .zip(b.y_step(i, j * rb))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            *o = o.max(w * s / np);
        }
    }
    Ok(out)
}

pub fn cauchy_gap_per_mode(
    sol_n: &BackwardSolution,
    sol_m: &BackwardSolution,
    lambda: f64,
) -> Result<Vec<f64>> {
    match (sol_n.scheme, sol_m.scheme) {
        (Scheme::Penalized { n }, Scheme::Penalized { n: m }) if m >= n => {}
        (a, b) => {
            return Err(Error::Structural(format!(
                "cauchy gap needs penalized(n), penalized(m) with m >= n, got {a}, {b}"
            )))
        }
    }
    sup_distance(sol_n, sol_m, lambda)
}

/// Largest per-mode Cauchy gap between two penalized solutions.
pub fn cauchy_gap(sol_n: &BackwardSolution, sol_m: &BackwardSolution, lambda: f64) -> Result<f64> {
    Ok(cauchy_gap_per_mode(sol_n, sol_m, lambda)?
        .into_iter()
        .fold(0.0, f64::max))
}
