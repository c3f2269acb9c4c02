//! Exact desk-scale references on a recombining binomial lattice: dynamic
//! programming for the reflected system, and brute-force enumeration of
//! mode maps on small trees.
//!
//! The lattice approximates the driftless reference diffusion: node
//! `(k, m)` sits at `x0 + σ√Δt (2m − k)` and moves up or down with
//! probability ½. Drift enters only through the driver's `z` term.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ApplicationMode, ProblemSpec};
use crate::reflected::reflect_counted;

/// Values on the lattice, `values[i][k][m]` for mode `i`, step `k`, node `m ≤ k`.
#[derive(Debug, Clone, Serialize)]
pub struct LatticeModel {
    pub n_steps: usize,
    pub dt: f64,
    pub x0: f64,
    pub sigma: f64,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl LatticeModel {
    #[inline]
    pub fn node_x(&self, k: usize, m: usize) -> f64 {
        node_x(self.x0, self.sigma, self.dt, k, m)
    }

    pub fn value(&self, mode: usize, k: usize, m: usize) -> f64 {
        self.values[mode][k][m]
    }

    /// Value of every mode at the root.
    pub fn root(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[0][0]).collect()
    }
}

#[inline]
fn node_x(x0: f64, sigma: f64, dt: f64, k: usize, m: usize) -> f64 {
    x0 + sigma * dt.sqrt() * (2.0 * m as f64 - k as f64)
}

fn lattice_sigma(spec: &ProblemSpec) -> Result<f64> {
    let sigma = spec.constant_sigma().ok_or_else(|| {
        Error::Unsupported("the lattice needs a constant sigma shared by all modes".into())
    })?;
    if spec.application_mode == ApplicationMode::General && !spec.coeffs.b.iter().all(|b| b.is_zero()) {
        return Err(Error::Unsupported(
            "general mode with a non-zero drift cannot be represented on the driftless lattice".into(),
        ));
    }
    Ok(sigma)
}

struct Lattice<'a> {
    spec: &'a ProblemSpec,
    n: usize,
    dt: f64,
    sigma: f64,
}

impl Lattice<'_> {
    fn new(spec: &ProblemSpec, n: usize) -> Result<Lattice<'_>> {
        if n == 0 {
            return Err(Error::Parameter("lattice needs at least one step".into()));
        }
        Ok(Lattice {
            spec,
            n,
            dt: spec.horizon.t_cap / n as f64,
            sigma: lattice_sigma(spec)?,
        })
    }

    fn x(&self, k: usize, m: usize) -> f64 {
        node_x(self.spec.x0, self.sigma, self.dt, k, m)
    }

    fn t(&self, k: usize) -> f64 {
        if k == self.n {
            self.spec.horizon.t_cap
        } else {
            k as f64 * self.dt
        }
    }

    fn terminal(&self, k: usize, m: usize) -> Result<f64> {
        Ok(self.spec.coeffs.g.eval(self.t(k), self.x(k, m), 0.0, 0.0)?)
    }

    /// Driver step from the two child values of `mode`.
    fn step(&self, mode: usize, k: usize, x: f64, up: f64, down: f64) -> Result<f64> {
        let c = 0.5 * (up + down);
        let z = (up - down) / (2.0 * self.dt.sqrt());
        let f = self.spec.driver()[mode].eval(self.t(k), x, c, z).map_err(|source| {
            Error::Coefficient {
                coefficient: "f",
                mode: mode + 1,
                step: k,
                path: 0,
                source,
            }
        })?;
        Ok(c + f * self.dt)
    }
}

/// Backward dynamic programming for the reflected system on the lattice.
pub fn dp_solve(spec: &ProblemSpec, n: usize) -> Result<LatticeModel> {
    let lat = Lattice::new(spec, n)?;
    let d = spec.modes();
    let mut values = vec![vec![Vec::new(); n + 1]; d];
    for m in 0..=n {
        let g = lat.terminal(n, m)?;
        for v in values.iter_mut() {
            v[n].push(g);
        }
    }
    let mut u = vec![0.0; d];
    for k in (0..n).rev() {
        for m in 0..=k {
            let x = lat.x(k, m);
            let out = if spec.horizon.inside(x) {
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = lat.step(i, k, x, values[i][k + 1][m + 1], values[i][k + 1][m])?;
                }
                reflect_counted(&u, &spec.costs)?.0
            } else {
                vec![lat.terminal(k, m)?; d]
            };
            for (i, v) in out.into_iter().enumerate() {
                values[i][k].push(v);
            }
        }
    }
    Ok(LatticeModel {
        n_steps: n,
        dt: lat.dt,
        x0: spec.x0,
        sigma: lat.sigma,
        values,
    })
}

/// Active mode at every interior decision node; `None` at exit nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeMap {
    pub modes: Vec<Vec<Option<usize>>>,
}

impl ModeMap {
    pub fn mode(&self, k: usize, m: usize) -> Option<usize> {
        self.modes[k][m]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Enumeration {
    pub value: f64,
    pub policy: ModeMap,
    pub evaluated: u64,
}

/// Default cap on the number of mode maps [`enumerate_strategies`] visits.
pub const DEFAULT_POLICY_BUDGET: u64 = 1 << 22;
const MAX_ENUM_STEPS: usize = 6;
const MAX_ENUM_MODES: usize = 3;

/// Decision nodes in `(k, m)` order with child links.
struct Tree {
    nodes: Vec<(usize, usize, f64)>,
    /// Index of the decision node at `(k, m)`, if any.
    index: Vec<Vec<Option<usize>>>,
    /// Value of non-decision nodes (terminal or exit), mode-independent.
    fixed: Vec<Vec<f64>>,
}

fn build_tree(lat: &Lattice<'_>) -> Result<Tree> {
    let n = lat.n;
    let mut nodes = Vec::new();
    let mut index = vec![Vec::new(); n + 1];
    let mut fixed = vec![Vec::new(); n + 1];
    for k in 0..=n {
        for m in 0..=k {
            let x = lat.x(k, m);
            if k < n && lat.spec.horizon.inside(x) {
                index[k].push(Some(nodes.len()));
                nodes.push((k, m, x));
                fixed[k].push(f64::NAN);
            } else {
                index[k].push(None);
                fixed[k].push(lat.terminal(k, m)?);
            }
        }
    }
    Ok(Tree { nodes, index, fixed })
}

/// Evaluates node `j` under `mode`: fills `val[j * d + i]` with the value
/// when arriving in mode `i`.
fn eval_node(lat: &Lattice<'_>, tree: &Tree, j: usize, mode: usize, val: &mut [f64]) -> Result<()> {
    let d = lat.spec.modes();
    let (k, m, x) = tree.nodes[j];
    let child = |mm: usize, val: &[f64]| match tree.index[k + 1][mm] {
        Some(c) => val[c * d + mode],
        None => tree.fixed[k + 1][mm],
    };
    let (up, down) = (child(m + 1, val), child(m, val));
    let w = lat.step(mode, k, x, up, down)?;
    for i in 0..d {
        val[j * d + i] = w - lat.spec.costs.get(i, mode);
    }
    Ok(())
}

/// Value at the root of following a fixed mode map: at node `(k, m)` the
/// active mode becomes `map(k, m)`, paying the switching cost if it differs
/// from the mode the node was reached in.
pub fn evaluate_mode_map(spec: &ProblemSpec, n: usize, map: impl Fn(usize, usize) -> usize) -> Result<f64> {
    let lat = Lattice::new(spec, n)?;
    let tree = build_tree(&lat)?;
    let d = spec.modes();
    let mut val = vec![0.0; tree.nodes.len() * d];
    for j in (0..tree.nodes.len()).rev() {
        let (k, m, _) = tree.nodes[j];
        let mode = map(k, m);
        if mode >= d {
            return Err(Error::Parameter(format!("mode map chose mode {} of {d}", mode + 1)));
        }
        eval_node(&lat, &tree, j, mode, &mut val)?;
    }
    Ok(match tree.index[0][0] {
        Some(root) => val[root * d + spec.i0],
        None => tree.fixed[0][0],
    })
}

/// Exhaustive search over all mode maps on an `n`-step lattice. Refuses
/// when `n > 6`, `d > 3`, or `d^(decision nodes)` exceeds `max_policies`.
pub fn enumerate_strategies(spec: &ProblemSpec, n: usize, max_policies: u64) -> Result<Enumeration> {
    let lat = Lattice::new(spec, n)?;
    let d = spec.modes();
    let tree = build_tree(&lat)?;
    let nodes = tree.nodes.len();
    let size_estimate = (d as f64).powi(nodes as i32);
    if n > MAX_ENUM_STEPS || d > MAX_ENUM_MODES || size_estimate > max_policies as f64 {
        return Err(Error::SearchSpace {
            size_estimate,
            budget: max_policies,
        });
    }
    let root_value = |val: &[f64]| match tree.index[0][0] {
        Some(root) => val[root * d + spec.i0],
        None => tree.fixed[0][0],
    };
    let to_map = |digits: &[usize]| ModeMap {
        modes: (0..n)
            .map(|k| (0..=k).map(|m| tree.index[k][m].map(|j| digits[j])).collect())
            .collect(),
    };

    // Mixed-radix counter over node modes, least significant digit at the
    // root. Changing digit j only affects node j and its ancestors, which
    // all have smaller indices.
    let mut digits = vec![0usize; nodes];
    let mut val = vec![0.0; nodes * d];
    for j in (0..nodes).rev() {
        eval_node(&lat, &tree, j, 0, &mut val)?;
    }
    let mut best = root_value(&val);
    let mut best_digits = digits.clone();
    let mut evaluated = 1u64;
    loop {
        let mut j = 0;
        while j < nodes && digits[j] + 1 == d {
            digits[j] = 0;
            j += 1;
        }
        if j == nodes {
            break;
        }
        digits[j] += 1;
        for r in (0..=j).rev() {
            eval_node(&lat, &tree, r, digits[r], &mut val)?;
        }
        evaluated += 1;
        let v = root_value(&val);
        if v > best {
            best = v;
            best_digits.copy_from_slice(&digits);
        }
    }
    Ok(Enumeration {
        value: best,
        policy: to_map(&best_digits),
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::model::SwitchingCostMatrix;

    #[test]
    fn martingale_root() {
        let spec = instances::switching_single("0", "0", "0.4");
        let lat = dp_solve(&spec, 20).unwrap();
        assert!((lat.root()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn node_moments_exact() {
        let spec = instances::switching_single("0", "0", "0.4");
        let lat = dp_solve(&spec, 4).unwrap();
        let (up, down) = (lat.node_x(1, 1), lat.node_x(1, 0));
        let mean = 0.5 * (up + down) - lat.x0;
        let var = 0.5 * ((up - lat.x0).powi(2) + (down - lat.x0).powi(2));
        assert!(mean.abs() < 1e-15);
        assert!((var - 0.16 * lat.dt).abs() < 1e-15);
    }

    #[test]
    fn lattice_values_in_closed_domain() {
        let spec = instances::desk2();
        let lat = dp_solve(&spec, 30).unwrap();
        for k in 0..=30 {
            for m in 0..=k {
                let (a, b) = (lat.value(0, k, m), lat.value(1, k, m));
                assert!(a >= b - 0.1 && b >= a - 0.1);
            }
        }
    }

    #[test]
    fn mode_dependent_sigma_unsupported() {
        let mut doc = instances::desk2_document();
        doc.coefficients.sigma = vec!["0.25".into(), "0.3".into()];
        let spec = ProblemSpec::from_document(&doc).unwrap();
        assert!(matches!(dp_solve(&spec, 5), Err(Error::Unsupported(_))));
        doc.coefficients.sigma = vec!["0.25 * x".into()];
        let spec = ProblemSpec::from_document(&doc).unwrap();
        assert!(matches!(dp_solve(&spec, 5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn exit_nodes_absorb() {
        let mut spec = instances::switching_single("0", "0", "1");
        spec.horizon.exit_hi = Some(1.5);
        spec.coeffs.g = crate::expr::parse("x * x").unwrap();
        let lat = dp_solve(&spec, 4).unwrap();
        // x(2, 2) = 1 + 2·√0.25 = 2 lies outside.
        assert_eq!(lat.value(0, 2, 2), 4.0);
    }

    #[test]
    fn refuses_large_search() {
        let spec = instances::desk2();
        match enumerate_strategies(&spec, 7, DEFAULT_POLICY_BUDGET) {
            Err(Error::SearchSpace { size_estimate, .. }) => assert_eq!(size_estimate, 2f64.powi(28)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(enumerate_strategies(&spec, 4, 100), Err(Error::SearchSpace { .. })));
    }

    #[test]
    fn huge_costs_never_switch() {
        let spec = instances::desk2().with_costs(SwitchingCostMatrix::uniform(2, 1e6, true)).unwrap();
        let e = enumerate_strategies(&spec, 4, DEFAULT_POLICY_BUDGET).unwrap();
        let single = dp_solve(&spec, 4).unwrap();
        assert!((e.value - single.root()[0]).abs() < 1e-12);
        assert!(e.policy.modes.iter().flatten().all(|m| *m == Some(0)));
    }

    #[test]
    fn enumeration_dominates_hand_written_maps() {
        let spec = instances::desk2();
        let e = enumerate_strategies(&spec, 4, DEFAULT_POLICY_BUDGET).unwrap();
        assert_eq!(e.evaluated, 1 << 10);
        let maps: [fn(usize, usize) -> usize; 4] = [|_, _| 0, |_, _| 1, |k, _| k % 2, |_, m| m % 2];
        for map in maps {
            assert!(evaluate_mode_map(&spec, 4, map).unwrap() <= e.value + 1e-12);
        }
        let best = evaluate_mode_map(&spec, 4, |k, m| e.policy.mode(k, m).unwrap()).unwrap();
        assert_eq!(best, e.value);
    }
}
