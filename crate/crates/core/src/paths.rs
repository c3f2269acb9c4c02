//! Forward simulation: Euler–Maruyama paths, stopping indices and
//! Girsanov log-weight increments.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{HorizonSpec, ProblemSpec};
use crate::rng::PathNormals;

/// Uniform grid on `[0, T_cap]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub t_cap: f64,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_cap: f64, n_steps: usize) -> Result<Self> {
        if !(t_cap > 0.0 && t_cap.is_finite()) || n_steps == 0 {
            return Err(Error::Parameter(format!(
                "time grid needs T_cap > 0 and N >= 1, got T_cap = {t_cap}, N = {n_steps}"
            )));
        }
        Ok(Self {
            n_steps,
            t_cap,
            dt: t_cap / n_steps as f64,
        })
    }

    pub fn from_horizon(h: &HorizonSpec) -> Self {
        Self::new(h.t_cap, h.n_steps).expect("horizon validated on construction")
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_cap
        } else {
            k as f64 * self.dt
        }
    }

    /// Steps of `self` per step of `coarse`, if `coarse` is nested in `self`.
    pub fn refinement_of(&self, coarse: &TimeGrid) -> Option<usize> {
        (self.t_cap == coarse.t_cap && self.n_steps % coarse.n_steps == 0)
            .then(|| self.n_steps / coarse.n_steps)
    }
}

/// Identifies the Brownian sample a bundle was built from. Bundles with
/// equal ids share increments on their common grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BundleId {
    pub seed: u64,
    pub n_paths: usize,
    /// Number of steps the increments were originally drawn on.
    pub base_steps: usize,
}

/// Simulated forward paths. All arrays are step-major: entry `(k, p)`
/// lives at `k * n_paths + p`.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub id: BundleId,
    pub grid: TimeGrid,
    modes: usize,
    dw: Vec<f64>,
    /// One state array per distinct forward process; a single shared one
    /// in switching mode.
    x: Vec<Vec<f64>>,
    kappa: Vec<usize>,
    dg: Option<Vec<Vec<f64>>>,
}

impl PathBundle {
    #[inline]
    pub fn n_paths(&self) -> usize {
        self.id.n_paths
    }

    #[inline]
    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Whether every mode shares the same state process.
    pub fn shared_state(&self) -> bool {
        self.x.len() == 1
    }

    #[inline]
    fn proc(&self, mode: usize) -> usize {
        if self.x.len() == 1 {
            0
        } else {
            mode
        }
    }

    /// Brownian increments of step `k` (from `t_k` to `t_{k+1}`).
    pub fn dw_step(&self, k: usize) -> &[f64] {
        let n = self.n_paths();
        &self.dw[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn dw(&self, k: usize, p: usize) -> f64 {
        self.dw[k * self.n_paths() + p]
    }

    /// States of `mode` at `t_k`.
    pub fn x_step(&self, mode: usize, k: usize) -> &[f64] {
        let n = self.n_paths();
        &self.x[self.proc(mode)][k * n..(k + 1) * n]
    }

    #[inline]
    pub fn x(&self, mode: usize, k: usize, p: usize) -> f64 {
        self.x[self.proc(mode)][k * self.n_paths() + p]
    }

    /// Stopping indices: first step at which the exit condition holds, else N.
    pub fn kappa(&self) -> &[usize] {
        &self.kappa
    }

    /// Per-mode Girsanov log-weight increments (switching mode only).
    pub fn dg_step(&self, mode: usize, k: usize) -> Option<&[f64]> {
        let n = self.n_paths();
        self.dg.as_ref().map(|dg| &dg[mode][k * n..(k + 1) * n])
    }

    /// Writes the bundle as flat little-endian arrays behind a small header.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        for v in [
            self.n_paths() as u64,
            self.grid.n_steps as u64,
            self.modes as u64,
            self.x.len() as u64,
            self.id.seed,
            self.id.base_steps as u64,
            self.dg.is_some() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.t_cap.to_le_bytes())?;
        let mut put = |v: &[f64]| -> Result<()> {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        put(&self.dw)?;
        for x in &self.x {
            put(x)?;
        }
        if let Some(dg) = &self.dg {
            for g in dg {
                put(g)?;
            }
        }
        for &k in &self.kappa {
            w.write_all(&(k as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Structural("not a path dump".into()));
        }
        let mut u = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let n = u()? as usize;
        let steps = u()? as usize;
        let modes = u()? as usize;
        let procs = u()? as usize;
        let seed = u()?;
        let base_steps = u()? as usize;
        let has_dg = u()? != 0;
        let t_cap = f64::from_bits(u()?);
        let mut floats = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let dw = floats(steps * n)?;
        let x = (0..procs)
            .map(|_| floats((steps + 1) * n))
            .collect::<Result<Vec<_>>>()?;
        let dg = if has_dg {
            Some((0..modes).map(|_| floats(steps * n)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let kappa = buf
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Ok(Self {
            id: BundleId {
                seed,
                n_paths: n,
                base_steps,
            },
            grid: TimeGrid::new(t_cap, steps)?,
            modes,
            dw,
            x,
            kappa,
            dg,
        })
    }
}

const DUMP_MAGIC: &[u8; 8] = b"OBSWPTH1";

/// Path-major `rows x cols` into step-major `cols x rows`.
fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(rows.max(1))
        .enumerate()
        .for_each(|(c, col)| {
            for (r, v) in col.iter_mut().enumerate() {
                *v = data[r * cols + c];
            }
        });
    out
}

/// Euler–Maruyama simulation of every mode's forward process.
pub fn simulate_forward(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::Parameter("n_paths must be at least 1".into()));
    }
    let n = grid.n_steps;
    let sqrt_dt = grid.dt.sqrt();
    let mut by_path = vec![0.0; n_paths * n];
    by_path
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(p, row)| {
            let mut normals = PathNormals::new(seed, p as u64, 0);
            for v in row {
                *v = sqrt_dt * normals.next_normal();
            }
        });
    let dw = transpose(&by_path, n_paths, n);
    let id = BundleId {
        seed,
        n_paths,
        base_steps: n,
    };
    build(spec, *grid, dw, id)
}

/// Re-runs the Euler scheme on a coarser nested grid, aggregating the
/// bundle's Brownian increments, so both bundles share one Brownian sample.
pub fn coarsen(spec: &ProblemSpec, bundle: &PathBundle, n_steps: usize) -> Result<PathBundle> {
    let coarse = TimeGrid::new(bundle.grid.t_cap, n_steps)?;
    let r = bundle.grid.refinement_of(&coarse).ok_or_else(|| {
        Error::Structural(format!(
            "grid with {} steps is not nested in the bundle's {} steps",
            n_steps, bundle.grid.n_steps
        ))
    })?;
    if r == 1 {
        return build(spec, coarse, bundle.dw.clone(), bundle.id);
    }
    let np = bundle.n_paths();
    let mut dw = vec![0.0; n_steps * np];
    dw.par_chunks_mut(np).enumerate().for_each(|(k, row)| {
        for (p, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..r {
                s += bundle.dw(k * r + j, p);
            }
            *v = s;
        }
    });
    build(spec, coarse, dw, bundle.id)
}

struct PathOut {
    x: Vec<f64>,
    kappa: usize,
    dg: Vec<f64>,
}

fn coefficient_error(
    coefficient: &'static str,
    mode: usize,
    step: usize,
    path: usize,
) -> impl FnOnce(crate::expr::EvalError) -> Error {
    move |source| Error::Coefficient {
        coefficient,
        mode: mode + 1,
        step,
        path,
        source,
    }
}

fn build(spec: &ProblemSpec, grid: TimeGrid, dw: Vec<f64>, id: BundleId) -> Result<PathBundle> {
    let d = spec.modes();
    let n = grid.n_steps;
    let np = id.n_paths;
    let shared = spec.is_switching() && spec.sigma_mode_independent();
    let procs = if shared { 1 } else { d };
    let stop_proc = if shared { 0 } else { spec.i0 };
    let weights = spec.is_switching();
    let h = &spec.horizon;

    let simulate = |p: usize| -> Result<PathOut> {
        let mut x = vec![0.0; procs * (n + 1)];
        let mut state = vec![spec.x0; procs];
        let mut kappa = if h.inside(spec.x0) { n } else { 0 };
        let mut dg = if weights { vec![0.0; d * n] } else { Vec::new() };
        for k in 0..=n {
            for (i, s) in state.iter().enumerate() {
                x[i * (n + 1) + k] = *s;
            }
            if k == n || k >= kappa {
                continue;
            }
            let t = grid.time(k);
            let w = dw[k * np + p];
            if weights {
                let xs = state[0];
                for (i, theta) in spec.kernel().iter().enumerate() {
                    let th = theta
                        .eval(t, xs, 0.0, 0.0)
                        .map_err(coefficient_error("b/sigma", i, k, p))?;
                    dg[i * n + k] = th * w - 0.5 * th * th * grid.dt;
                }
            }
            for (i, s) in state.iter_mut().enumerate() {
                let sigma = spec.coeffs.sigma[i]
                    .eval(t, *s, 0.0, 0.0)
                    .map_err(coefficient_error("sigma", i, k, p))?;
                let drift = match spec.forward_drift(i) {
                    Some(b) => b
                        .eval(t, *s, 0.0, 0.0)
                        .map_err(coefficient_error("b", i, k, p))?,
                    None => 0.0,
                };
                *s += drift * grid.dt + sigma * w;
            }
            if !h.inside(state[stop_proc]) {
                kappa = k + 1;
            }
        }
        Ok(PathOut { x, kappa, dg })
    };

    let outs: Vec<Result<PathOut>> = (0..np).into_par_iter().map(simulate).collect();
    let mut rows = Vec::with_capacity(np);
    for o in outs {
        rows.push(o?);
    }
    let kappa: Vec<usize> = rows.iter().map(|r| r.kappa).collect();
    let gather = |f: &dyn Fn(&PathOut) -> &[f64], len: usize| -> Vec<f64> {
        let mut flat = Vec::with_capacity(np * len);
        for r in &rows {
            flat.extend_from_slice(f(r));
        }
        transpose(&flat, np, len)
    };
    let x = (0..procs)
        .map(|i| gather(&|r: &PathOut| &r.x[i * (n + 1)..(i + 1) * (n + 1)], n + 1))
        .collect();
    let dg = weights.then(|| {
        (0..d)
            .map(|i| gather(&|r: &PathOut| &r.dg[i * n..(i + 1) * n], n))
            .collect()
    });
    Ok(PathBundle {
        id,
        grid,
        modes: d,
        dw,
        x,
        kappa,
        dg,
    })
}

/// Girsanov log-density `Σ θ ΔW − ½ Σ θ² Δt` of the controlled measure
/// along each path, summed up to the stopping index. `mode_at(p, k)` gives
/// the active mode during step `k` on path `p`.
pub fn girsanov_logweight(
    bundle: &PathBundle,
    spec: &ProblemSpec,
    mode_at: impl Fn(usize, usize) -> usize + Sync,
) -> Result<Vec<f64>> {
    let grid = bundle.grid;
    let out: Vec<Result<f64>> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut lw = 0.0;
            for k in 0..bundle.kappa[p] {
                let m = mode_at(p, k);
                let th = spec.kernel()[m]
                    .eval(grid.time(k), bundle.x(m, k, p), 0.0, 0.0)
                    .map_err(coefficient_error("b/sigma", m, k, p))?;
                lw += th * bundle.dw(k, p) - 0.5 * th * th * grid.dt;
            }
            Ok(lw)
        })
        .collect();
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    fn spec_with(b: &str, sigma: &str, x0: f64, switching: bool) -> ProblemSpec {
        instances::single_mode(b, sigma, x0, switching)
    }

    #[test]
    fn zero_coefficients_keep_x0() {
        let spec = spec_with("0", "0", 1.5, false);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let b = simulate_forward(&spec, &grid, 50, 1).unwrap();
        for k in 0..=10 {
            assert!(b.x_step(0, k).iter().all(|&x| x == 1.5));
        }
    }

    #[test]
    fn unit_drift_deterministic() {
        let spec = spec_with("1", "0", 0.0, false);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let b = simulate_forward(&spec, &grid, 8, 1).unwrap();
        for &x in b.x_step(0, 10) {
            assert!((x - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn driftless_moments() {
        let spec = spec_with("0", "0.2", 1.0, false);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n = 100_000;
        let b = simulate_forward(&spec, &grid, n, 3).unwrap();
        let xs = b.x_step(0, 10);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.2 / (n as f64).sqrt());
        assert!((var / 0.04 - 1.0).abs() < 0.05);
    }

    #[test]
    fn increments_moment_sanity() {
        let spec = spec_with("0", "1", 0.0, false);
        let grid = TimeGrid::new(2.0, 20).unwrap();
        let n = 10_000;
        let b = simulate_forward(&spec, &grid, n, 9).unwrap();
        let all: Vec<f64> = (0..20).flat_map(|k| b.dw_step(k).to_vec()).collect();
        let m = all.len() as f64;
        let mean = all.iter().sum::<f64>() / m;
        let var = all.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() <= 4.0 * (grid.dt / m).sqrt());
        assert!((var / grid.dt - 1.0).abs() <= 0.05);
    }

    #[test]
    fn exit_freezes_paths() {
        let mut spec = spec_with("0", "1", 0.0, false);
        spec.horizon.exit_lo = Some(-0.3);
        spec.horizon.exit_hi = Some(0.3);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let b = simulate_forward(&spec, &grid, 500, 4).unwrap();
        let mut stopped = 0;
        for p in 0..500 {
            let kap = b.kappa()[p];
            if kap < 50 {
                stopped += 1;
                assert!(!spec.horizon.inside(b.x(0, kap, p)));
                for k in 0..kap {
                    assert!(spec.horizon.inside(b.x(0, k, p)));
                }
            }
            for k in kap..=50 {
                assert_eq!(b.x(0, k, p), b.x(0, kap, p));
            }
        }
        assert!(stopped > 100);
    }

    #[test]
    fn x0_outside_stops_immediately() {
        let mut spec = spec_with("0", "1", 2.0, false);
        spec.horizon.exit_hi = Some(1.0);
        let b = simulate_forward(&spec, &TimeGrid::new(1.0, 5).unwrap(), 3, 0).unwrap();
        assert!(b.kappa().iter().all(|&k| k == 0));
    }

    #[test]
    fn evaluation_error_is_located() {
        let spec = spec_with("1 / x", "0", 0.0, false);
        let err = simulate_forward(&spec, &TimeGrid::new(1.0, 5).unwrap(), 3, 0).unwrap_err();
        match err {
            Error::Coefficient { coefficient, mode, step, path, .. } => {
                assert_eq!((coefficient, mode, step, path), ("b", 1, 0, 0));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let spec = instances::desk2();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_forward(&spec, &grid, 3000, 5).unwrap());
        let b = four.install(|| simulate_forward(&spec, &grid, 3000, 5).unwrap());
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.x, b.x);
        assert_eq!(a.dg, b.dg);
    }

    #[test]
    fn coarsen_sums_increments() {
        let spec = instances::desk2();
        let fine = simulate_forward(&spec, &TimeGrid::new(1.0, 20).unwrap(), 100, 2).unwrap();
        let coarse = coarsen(&spec, &fine, 10).unwrap();
        for p in 0..100 {
            assert!((coarse.dw(3, p) - fine.dw(6, p) - fine.dw(7, p)).abs() < 1e-15);
            // Driftless shared state: coarse states match fine states at common times.
            assert!((coarse.x(0, 10, p) - fine.x(0, 20, p)).abs() < 1e-12);
        }
        assert!(matches!(coarsen(&spec, &fine, 7), Err(Error::Structural(_))));
    }

    #[test]
    fn logweight_zero_without_drift() {
        let spec = instances::switching_single("x", "0", "1");
        let b = simulate_forward(&spec, &TimeGrid::new(1.0, 10).unwrap(), 200, 1).unwrap();
        let lw = girsanov_logweight(&b, &spec, |_, _| 0).unwrap();
        assert!(lw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logweight_constant_drift_identity() {
        let spec = instances::switching_single("x", "0.3", "1");
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let b = simulate_forward(&spec, &grid, 200, 1).unwrap();
        let lw = girsanov_logweight(&b, &spec, |_, _| 0).unwrap();
        for p in 0..200 {
            let w_t: f64 = (0..10).map(|k| b.dw(k, p)).sum();
            assert!((lw[p] - (0.3 * w_t - 0.5 * 0.09 * 1.0)).abs() < 1e-12);
            let from_dg: f64 = (0..10).map(|k| b.dg_step(0, k).unwrap()[p]).sum();
            assert!((lw[p] - from_dg).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_is_mean_one() {
        let spec = instances::switching_single("x", "0.3", "1");
        let b = simulate_forward(&spec, &TimeGrid::new(1.0, 10).unwrap(), 100_000, 8).unwrap();
        let w: Vec<f64> = girsanov_logweight(&b, &spec, |_, _| 0)
            .unwrap()
            .into_iter()
            .map(f64::exp)
            .collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sd / n.sqrt());
    }

    #[test]
    fn dump_roundtrip() {
        let spec = instances::desk2();
        let b = simulate_forward(&spec, &TimeGrid::new(1.0, 4).unwrap(), 7, 3).unwrap();
        let mut buf = Vec::new();
        b.write_dump(&mut buf).unwrap();
        let r = PathBundle::read_dump(buf.as_slice()).unwrap();
        assert_eq!(r.id, b.id);
        assert_eq!(r.dw, b.dw);
        assert_eq!(r.x, b.x);
        assert_eq!(r.kappa, b.kappa);
        assert_eq!(r.dg, b.dg);
    }
}
