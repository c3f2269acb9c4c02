//! Backward induction shared by the penalized and reflected schemes.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, SwitchingCostMatrix};
use crate::paths::{BundleId, PathBundle, TimeGrid};
use crate::penalized::add_penalty;
use crate::reflected::reflect_in_place;
use crate::regression::{fit_masked, FittedFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Penalized { n: u64 },
    Reflected,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Penalized { n } => write!(f, "penalized({n})"),
            Scheme::Reflected => f.write_str("reflected"),
        }
    }
}

/// Discrete solution `(Y, Z, ΔK)` on a path bundle. Arrays are indexed
/// `[mode][k * n_paths + p]` for `k = 0..=N`; the `Z` and `ΔK` rows at `N`
/// are zero.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub scheme: Scheme,
    pub grid: TimeGrid,
    pub bundle: BundleId,
    /// Requested polynomial degree of the regression basis.
    pub degree: usize,
    pub costs: SwitchingCostMatrix,
    /// Value per mode at `t = 0`.
    pub y0: Vec<f64>,
    /// Monte Carlo standard error attached to `y0`.
    pub y0_se: Vec<f64>,
    /// Number of `(mode, step)` fits that fell back to a lower degree.
    pub reduced_fits: usize,
    n_paths: usize,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    dk: Vec<Vec<f64>>,
    kappa: Vec<usize>,
    cont: Vec<Vec<FittedFunction>>,
    zfit: Vec<Vec<FittedFunction>>,
}

impl BackwardSolution {
    pub fn modes(&self) -> usize {
        self.y.len()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn y(&self, mode: usize, k: usize, p: usize) -> f64 {
        self.y[mode][k * self.n_paths + p]
    }

    pub fn y_step(&self, mode: usize, k: usize) -> &[f64] {
        &self.y[mode][k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn z_step(&self, mode: usize, k: usize) -> &[f64] {
        &self.z[mode][k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn dk_step(&self, mode: usize, k: usize) -> &[f64] {
        &self.dk[mode][k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn kappa(&self) -> &[usize] {
        &self.kappa
    }

    /// Fitted continuation value `E[Y_{k+1} | X_k = x]` of `mode`.
    pub fn continuation(&self, mode: usize, k: usize) -> &FittedFunction {
        &self.cont[mode][k]
    }

    pub fn z_fit(&self, mode: usize, k: usize) -> &FittedFunction {
        &self.zfit[mode][k]
    }

    /// Solved field at an arbitrary state: the value each mode would get at
    /// `(t_k, x)` from the stored regressions. Used for feedback policies
    /// on paths other than the ones the solution was fitted on.
    pub fn value_at(&self, spec: &ProblemSpec, k: usize, x: f64) -> Result<Vec<f64>> {
        let d = self.modes();
        if k == 0 {
            return Ok(self.y0.clone());
        }
        if k >= self.grid.n_steps || !spec.horizon.inside(x) {
            let g = spec.coeffs.g.eval(self.grid.time(k), x, 0.0, 0.0)?;
            return Ok(vec![g; d]);
        }
        let t = self.grid.time(k);
        let cont: Vec<f64> = (0..d).map(|i| self.cont[i][k].eval(x)).collect();
        let mut u = vec![0.0; d];
        for i in 0..d {
            let z = self.zfit[i][k].eval(x);
            u[i] = cont[i] + spec.driver()[i].eval(t, x, cont[i], z)? * self.grid.dt;
        }
        let mut dk = vec![0.0; d];
        apply_scheme(self.scheme, &self.costs, self.grid.dt, &cont, &mut u, &mut dk)?;
        Ok(u)
    }
}

pub(crate) fn apply_scheme(
    scheme: Scheme,
    costs: &SwitchingCostMatrix,
    dt: f64,
    cont: &[f64],
    u: &mut [f64],
    dk: &mut [f64],
) -> Result<()> {
    match scheme {
        Scheme::Penalized { n } => {
            add_penalty(cont, u, dk, costs, n as f64 * dt);
            Ok(())
        }
        Scheme::Reflected => reflect_in_place(u, dk, costs).map(|_| ()),
    }
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = ordered_sum(values.iter().copied()) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = ordered_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (mean, (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

/// Sum in fixed blocks combined left to right.
pub(crate) fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut block = 0.0;
    for (i, v) in values.enumerate() {
        block += v;
        if i % 4096 == 4095 {
            total += block;
            block = 0.0;
        }
    }
    total + block
}

pub(crate) fn check_bundle(bundle: &PathBundle, spec: &ProblemSpec) -> Result<()> {
    if bundle.modes() != spec.modes() {
        return Err(Error::Structural(format!(
            "bundle has {} modes, problem has {}",
            bundle.modes(),
            spec.modes()
        )));
    }
    if bundle.grid.t_cap != spec.horizon.t_cap {
        return Err(Error::Structural(format!(
            "bundle horizon {} differs from problem horizon {}",
            bundle.grid.t_cap, spec.horizon.t_cap
        )));
    }
    Ok(())
}

pub(crate) fn terminal_values(bundle: &PathBundle, spec: &ProblemSpec, mode: usize) -> Result<Vec<f64>> {
    let n = bundle.grid.n_steps;
    let t = bundle.grid.t_cap;
    let out: Vec<Result<f64>> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let kap = bundle.kappa()[p];
            spec.coeffs
                .g
                .eval(t, bundle.x(mode, n, p), 0.0, 0.0)
                .map_err(|source| Error::Coefficient {
                    coefficient: "g",
                    mode: mode + 1,
                    step: kap,
                    path: p,
                    source,
                })
        })
        .collect();
    out.into_iter().collect()
}

/// Backward loop: regress, take an explicit driver step, then apply the
/// scheme's constraint handling (penalty or reflection).
pub(crate) fn backward_solve(
    bundle: &PathBundle,
    spec: &ProblemSpec,
    scheme: Scheme,
    degree: usize,
) -> Result<BackwardSolution> {
    check_bundle(bundle, spec)?;
    let grid = bundle.grid;
    if let Scheme::Penalized { n } = scheme {
        let ndt = n as f64 * grid.dt;
        if ndt > 0.5 {
            return Err(Error::Parameter(format!(
                "penalty {n} with step {} gives n*dt = {ndt} > 0.5",
                grid.dt
            )));
        }
    }
    let d = spec.modes();
    let np = bundle.n_paths();
    let nsteps = grid.n_steps;
    let kappa = bundle.kappa();
    let costs = &spec.costs;

    let mut y: Vec<Vec<f64>> = vec![vec![0.0; (nsteps + 1) * np]; d];
    let mut z: Vec<Vec<f64>> = vec![vec![0.0; (nsteps + 1) * np]; d];
    let mut dk: Vec<Vec<f64>> = vec![vec![0.0; (nsteps + 1) * np]; d];
    for (i, yi) in y.iter_mut().enumerate() {
        let g = terminal_values(bundle, spec, i)?;
        yi[nsteps * np..].copy_from_slice(&g);
    }
    let placeholder = FittedFunction::constant(0.0, degree);
    let mut cont_fits = vec![vec![placeholder.clone(); nsteps]; d];
    let mut z_fits = vec![vec![placeholder; nsteps]; d];
    let mut reduced = 0;

    let mut cvals = vec![vec![0.0; np]; d];
    let mut zvals = vec![vec![0.0; np]; d];
    let mut target = vec![0.0; np];
    let mut out_y = vec![0.0; np * d];
    let mut out_dk = vec![0.0; np * d];

    for k in (0..nsteps).rev() {
        let t = grid.time(k);
        let active: Vec<bool> = kappa.iter().map(|&kap| kap > k).collect();
        let dw = bundle.dw_step(k);
        for i in 0..d {
            let xs = bundle.x_step(i, k);
            let next = &y[i][(k + 1) * np..(k + 2) * np];
            let cf = fit_masked(next, xs, Some(&active), degree);
            cvals[i]
                .par_iter_mut()
                .enumerate()
                .for_each(|(p, c)| *c = if active[p] { cf.eval(xs[p]) } else { 0.0 });
            let ci = &cvals[i];
            target.par_iter_mut().enumerate().for_each(|(p, v)| {
                *v = if active[p] {
                    (next[p] - ci[p]) * dw[p] / grid.dt
                } else {
                    0.0
                }
            });
            let zf = fit_masked(&target, xs, Some(&active), degree);
            zvals[i]
                .par_iter_mut()
                .enumerate()
                .for_each(|(p, v)| *v = if active[p] { zf.eval(xs[p]) } else { 0.0 });
            reduced += cf.reduced() as usize + zf.reduced() as usize;
            cont_fits[i][k] = cf;
            z_fits[i][k] = zf;
        }

        let yr = &y;
        let (cv, zv) = (&cvals, &zvals);
        let results: Vec<Result<()>> = out_y
            .par_chunks_mut(d)
            .zip(out_dk.par_chunks_mut(d))
            .enumerate()
            .map(|(p, (uy, udk))| {
                if !active[p] {
                    for i in 0..d {
                        uy[i] = yr[i][(k + 1) * np + p];
                        udk[i] = 0.0;
                    }
                    return Ok(());
                }
                let mut cont = [0.0; 8];
                let mut cont_vec;
                let cont: &mut [f64] = if d <= 8 {
                    &mut cont[..d]
                } else {
                    cont_vec = vec![0.0; d];
                    &mut cont_vec
                };
                for i in 0..d {
                    let c = cv[i][p];
                    cont[i] = c;
                    let x = bundle.x(i, k, p);
                    let f = spec.driver()[i]
                        .eval(t, x, c, zv[i][p])
                        .map_err(|source| Error::Coefficient {
                            coefficient: "f",
                            mode: i + 1,
                            step: k,
                            path: p,
                            source,
                        })?;
                    uy[i] = c + f * grid.dt;
                }
                apply_scheme(scheme, costs, grid.dt, cont, uy, udk)
            })
            .collect();
        for r in results {
            r?;
        }
        for i in 0..d {
            let row = k * np;
            for p in 0..np {
                y[i][row + p] = out_y[p * d + i];
                dk[i][row + p] = out_dk[p * d + i];
                z[i][row + p] = if active[p] { zvals[i][p] } else { 0.0 };
            }
        }
    }

    let mut y0 = Vec::with_capacity(d);
    let mut y0_se = Vec::with_capacity(d);
    for yi in &y {
        let row0 = &yi[..np];
        let m = if row0.iter().all(|&v| v == row0[0]) {
            row0[0]
        } else {
            mean_and_se(row0).0
        };
        let (_, se) = mean_and_se(&yi[np..2 * np]);
        y0.push(m);
        y0_se.push(se);
    }
    Ok(BackwardSolution {
        scheme,
        grid,
        bundle: bundle.id,
        degree,
        costs: costs.clone(),
        y0,
        y0_se,
        reduced_fits: reduced,
        n_paths: np,
        y,
        z,
        dk,
        kappa: kappa.to_vec(),
        cont: cont_fits,
        zfit: z_fits,
    })
}
