//! Strategy extraction from a solved field, controlled simulation, and
//! profit estimation.

use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ProblemSpec, SwitchingCostMatrix};
use crate::paths::{PathBundle, TimeGrid};
use crate::rng::PathNormals;
use crate::solution::{mean_and_se, BackwardSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Switch {
    /// Step at which the switch happens (the new mode is active on step `k`).
    pub k: usize,
    pub from: usize,
    pub to: usize,
}

/// Per-path switching decisions. Modes are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub i0: usize,
    pub n_steps: usize,
    pub switches: Vec<Vec<Switch>>,
}

impl Strategy {
    pub fn never(n_paths: usize, n_steps: usize, i0: usize) -> Self {
        Self {
            i0,
            n_steps,
            switches: vec![Vec::new(); n_paths],
        }
    }

    /// Checked constructor: steps strictly increasing, modes chained.
    pub fn new(i0: usize, n_steps: usize, switches: Vec<Vec<Switch>>) -> Result<Self> {
        for (p, sw) in switches.iter().enumerate() {
            let mut mode = i0;
            let mut last = None;
            for s in sw {
                if s.from != mode || s.to == s.from || s.k >= n_steps || last.is_some_and(|l| s.k <= l) {
                    return Err(Error::Structural(format!("inconsistent switch {s:?} on path {p}")));
                }
                mode = s.to;
                last = Some(s.k);
            }
        }
        Ok(Self {
            i0,
            n_steps,
            switches,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.switches.len()
    }

    /// Mode active during step `k` on path `p`.
    pub fn mode_at(&self, p: usize, k: usize) -> usize {
        self.switches[p]
            .iter()
            .take_while(|s| s.k <= k)
            .last()
            .map_or(self.i0, |s| s.to)
    }

    /// Active mode for every step `0..N`.
    pub fn mode_path(&self, p: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_steps);
        let mut it = self.switches[p].iter().peekable();
        let mut mode = self.i0;
        for k in 0..self.n_steps {
            while let Some(s) = it.peek() {
                if s.k == k {
                    mode = s.to;
                    it.next();
                } else {
                    break;
                }
            }
            out.push(mode);
        }
        out
    }

    /// Cost paid at step `k` on path `p`.
    pub fn cost_at(&self, p: usize, k: usize, costs: &SwitchingCostMatrix) -> f64 {
        self.switches[p]
            .iter()
            .find(|s| s.k == k)
            .map_or(0.0, |s| costs.get(s.from, s.to))
    }

    pub fn total_cost(&self, p: usize, costs: &SwitchingCostMatrix) -> f64 {
        self.switches[p].iter().map(|s| costs.get(s.from, s.to)).sum()
    }

    pub fn switch_count(&self, p: usize) -> usize {
        self.switches[p].len()
    }
}

/// Default switching trigger tolerance for a solved field.
pub fn default_tol(sol: &BackwardSolution) -> f64 {
    1e-9 * (1.0 + sol.y0.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Best alternative to mode `from`: `argmax_{j≠from}(y_j − C_from,j)`,
/// smallest index on ties.
fn best_alternative(y: &[f64], from: usize, costs: &SwitchingCostMatrix) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in (0..y.len()).filter(|&j| j != from) {
        let v = y[j] - costs.get(from, j);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best
}

fn decide(y: &[f64], from: usize, costs: &SwitchingCostMatrix, tol: f64) -> Option<usize> {
    best_alternative(y, from, costs).and_then(|(j, v)| (y[from] <= v + tol).then_some(j))
}

/// Walks each path forward from `i0`, switching whenever the current mode's
/// value touches the obstacle. At most one switch per step.
pub fn extract_strategy(
    sol: &BackwardSolution,
    bundle: &PathBundle,
    i0: usize,
    tol: Option<f64>,
) -> Result<Strategy> {
    if sol.bundle != bundle.id || sol.grid != bundle.grid {
        return Err(Error::Structural("solution was not computed on this bundle".into()));
    }
    let d = sol.modes();
    if i0 >= d {
        return Err(Error::Parameter(format!("initial mode {} out of range", i0 + 1)));
    }
    let tol = tol.unwrap_or_else(|| default_tol(sol));
    if !(tol >= 0.0) {
        return Err(Error::Parameter(format!("tolerance must be non-negative, got {tol}")));
    }
    let switches = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::new();
            let mut mode = i0;
            let mut y = vec![0.0; d];
            for k in 0..bundle.kappa()[p] {
                for (j, v) in y.iter_mut().enumerate() {
                    *v = sol.y(j, k, p);
                }
                if let Some(to) = decide(&y, mode, &sol.costs, tol) {
                    out.push(Switch { k, from: mode, to });
                    mode = to;
                }
            }
            out
        })
        .collect();
    Ok(Strategy {
        i0,
        n_steps: sol.grid.n_steps,
        switches,
    })
}

/// Deviation applied on top of a feedback rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    None,
    /// Act on each switching signal this many steps late.
    Delay(usize),
    /// Switch when `Y_ζ ≤ obstacle + tol + shift`.
    ThresholdShift(f64),
    /// With probability `prob` per step, switch to a uniformly drawn other
    /// mode instead of following the rule.
    RandomSwitch { prob: f64, seed: u64 },
    /// Follow the rule but force mode `to` at step `k`.
    ForcedSwitchAt { k: usize, to: usize },
}

/// Decision rule read off a solved field at the current `(t_k, X, mode)`.
#[derive(Debug, Clone)]
pub struct FeedbackRule<'a> {
    pub field: &'a BackwardSolution,
    pub tol: f64,
    pub perturbation: Perturbation,
}

impl<'a> FeedbackRule<'a> {
    pub fn optimal(field: &'a BackwardSolution) -> Self {
        Self {
            field,
            tol: default_tol(field),
            perturbation: Perturbation::None,
        }
    }

    pub fn perturbed(field: &'a BackwardSolution, perturbation: Perturbation) -> Self {
        Self {
            perturbation,
            ..Self::optimal(field)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Policy<'a> {
    NeverSwitch,
    /// Move to the next mode (cyclically) at every step.
    AlwaysSwitch,
    /// The same `(step, mode)` schedule on every path.
    OpenLoop(Vec<(usize, usize)>),
    /// A per-path strategy; path `p` of the simulation follows `switches[p]`.
    PerPath(&'a Strategy),
    Feedback(FeedbackRule<'a>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Estimator {
    ControlledDrift,
    Girsanov,
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "controlled-drift" | "controlled" => Ok(Estimator::ControlledDrift),
            "girsanov" => Ok(Estimator::Girsanov),
            other => Err(Error::Parameter(format!(
                "unknown estimator `{other}` (expected controlled-drift or girsanov)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfitEstimate {
    pub mean: f64,
    pub se: f64,
    /// Mean likelihood ratio and its standard error (Girsanov only).
    pub mean_weight: Option<f64>,
    pub weight_se: Option<f64>,
    pub mean_switches: f64,
    /// `histogram[c]` = number of paths with `c` switches.
    pub switch_histogram: Vec<usize>,
    #[serde(skip)]
    pub payoffs: Vec<f64>,
}

struct PathResult {
    payoff: f64,
    weight: f64,
    switches: usize,
}

fn located(coefficient: &'static str, mode: usize, step: usize, path: usize) -> impl FnOnce(crate::expr::EvalError) -> Error {
    move |source| Error::Coefficient {
        coefficient,
        mode: mode + 1,
        step,
        path,
        source,
    }
}

/// Monte Carlo estimate of `J = E[g(X_τ̂) + Σ l Δt − Σ C]` under the
/// controlled dynamics, either simulated directly or reweighted from the
/// driftless reference process.
pub fn estimate_profit(
    spec: &ProblemSpec,
    policy: &Policy<'_>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    estimator: Estimator,
) -> Result<ProfitEstimate> {
    let d = spec.modes();
    let l = spec
        .running_reward()
        .ok_or_else(|| Error::Specification("profit estimation requires a running reward `l`".into()))?;
    if estimator == Estimator::Girsanov {
        let h = &spec.coeffs.declared;
        if !spec.is_switching() || !h.sigma_min.is_some_and(|s| s > 0.0) || h.b_bound.is_none() {
            return Err(Error::Specification(
                "the girsanov estimator needs switching mode with a declared sigma floor and drift bound".into(),
            ));
        }
    }
    if n_paths == 0 {
        return Err(Error::Parameter("n_paths must be at least 1".into()));
    }
    if let Policy::PerPath(s) = policy {
        if s.n_paths() != n_paths || s.n_steps != grid.n_steps {
            return Err(Error::Structural("per-path strategy does not match the simulation size".into()));
        }
    }
    if let Policy::Feedback(rule) = policy {
        if rule.field.grid != *grid || rule.field.modes() != d {
            return Err(Error::Structural("feedback field was solved on a different grid".into()));
        }
    }
    let sqrt_dt = grid.dt.sqrt();
    let h = &spec.horizon;

    let simulate = |p: usize| -> Result<PathResult> {
        let mut normals = PathNormals::new(seed, p as u64, 0);
        let mut x = spec.x0;
        let mut mode = spec.i0;
        let mut payoff = 0.0;
        let mut logw = 0.0;
        let mut switches = 0;
        let mut pending: Option<(usize, usize)> = None;
        let mut alive = h.inside(x);
        for k in 0..grid.n_steps {
            if !alive {
                break;
            }
            let t = grid.time(k);
            let w = sqrt_dt * normals.next_normal();
            let target = match policy {
                Policy::NeverSwitch => None,
                Policy::AlwaysSwitch => (d > 1).then(|| (mode + 1) % d),
                Policy::OpenLoop(plan) => plan.iter().find(|(s, _)| *s == k).map(|&(_, to)| to),
                Policy::PerPath(s) => Some(s.mode_at(p, k)),
                Policy::Feedback(rule) => {
                    let y = rule.field.value_at(spec, k, x)?;
                    let costs = &rule.field.costs;
                    match &rule.perturbation {
                        Perturbation::None => decide(&y, mode, costs, rule.tol),
                        Perturbation::ThresholdShift(shift) => decide(&y, mode, costs, rule.tol + shift),
                        Perturbation::Delay(lag) => {
                            if pending.is_none() {
                                if let Some(to) = decide(&y, mode, costs, rule.tol) {
                                    pending = Some((to, k + lag));
                                }
                            }
                            match pending {
                                Some((to, due)) if due == k => {
                                    pending = None;
                                    Some(to)
                                }
                                _ => None,
                            }
                        }
                        Perturbation::RandomSwitch { prob, seed: s } => {
                            let mut u = PathNormals::new(*s, p as u64, k as u64);
                            if d > 1 && u.next_uniform() < *prob {
                                let r = (u.next_uniform() * (d - 1) as f64) as usize;
                                Some(if r >= mode { r + 1 } else { r })
                            } else {
                                decide(&y, mode, costs, rule.tol)
                            }
                        }
                        Perturbation::ForcedSwitchAt { k: fk, to } => {
                            if *fk == k {
                                Some(*to)
                            } else {
                                decide(&y, mode, costs, rule.tol)
                            }
                        }
                    }
                }
            };
            if let Some(to) = target {
                if to >= d {
                    return Err(Error::Parameter(format!("policy chose mode {} of {d}", to + 1)));
                }
                if to != mode {
                    payoff -= spec.costs.get(mode, to);
                    mode = to;
                    switches += 1;
                }
            }
            payoff += l[mode].eval(t, x, 0.0, 0.0).map_err(located("l", mode, k, p))? * grid.dt;
            let sigma = spec.coeffs.sigma[mode]
                .eval(t, x, 0.0, 0.0)
                .map_err(located("sigma", mode, k, p))?;
            match estimator {
                Estimator::ControlledDrift => {
                    let b = spec.coeffs.b[mode].eval(t, x, 0.0, 0.0).map_err(located("b", mode, k, p))?;
                    x += b * grid.dt + sigma * w;
                }
                Estimator::Girsanov => {
                    let th = spec.kernel()[mode]
                        .eval(t, x, 0.0, 0.0)
                        .map_err(located("b/sigma", mode, k, p))?;
                    logw += th * w - 0.5 * th * th * grid.dt;
                    x += sigma * w;
                }
            }
            alive = h.inside(x);
        }
        payoff += spec.coeffs.g.eval(grid.t_cap, x, 0.0, 0.0).map_err(located("g", mode, grid.n_steps, p))?;
        let weight = logw.exp();
        Ok(PathResult {
            payoff: payoff * weight,
            weight,
            switches,
        })
    };

    let results: Vec<Result<PathResult>> = (0..n_paths).into_par_iter().map(simulate).collect();
    let mut payoffs = Vec::with_capacity(n_paths);
    let mut weights = Vec::with_capacity(n_paths);
    let mut histogram = Vec::new();
    let mut total_switches = 0usize;
    for r in results {
        let r = r?;
        payoffs.push(r.payoff);
        weights.push(r.weight);
        if histogram.len() <= r.switches {
            histogram.resize(r.switches + 1, 0);
        }
        histogram[r.switches] += 1;
        total_switches += r.switches;
    }
    let (mean, se) = mean_and_se(&payoffs);
    let (mw, wse) = mean_and_se(&weights);
    let girsanov = estimator == Estimator::Girsanov;
    Ok(ProfitEstimate {
        mean,
        se,
        mean_weight: girsanov.then_some(mw),
        weight_se: girsanov.then_some(wse),
        mean_switches: total_switches as f64 / n_paths as f64,
        switch_histogram: histogram,
        payoffs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ImprovementRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    /// `J(α) − J(α*)`.
    pub diff: f64,
    /// Three combined standard errors.
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImprovementReport {
    pub optimal: f64,
    pub optimal_se: f64,
    pub rows: Vec<ImprovementRow>,
}

impl ImprovementReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Compares the field's own feedback policy against each alternative on
/// common random numbers: none may beat it by more than three combined
/// standard errors.
pub fn policy_improvement_check(
    spec: &ProblemSpec,
    sol: &BackwardSolution,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    alternatives: &[(String, Policy<'_>)],
) -> Result<ImprovementReport> {
    let star = estimate_profit(
        spec,
        &Policy::Feedback(FeedbackRule::optimal(sol)),
        grid,
        n_paths,
        seed,
        Estimator::ControlledDrift,
    )?;
    let mut rows = Vec::with_capacity(alternatives.len());
    for (name, policy) in alternatives {
        let est = estimate_profit(spec, policy, grid, n_paths, seed, Estimator::ControlledDrift)?;
        let diff = est.mean - star.mean;
        let tolerance = 3.0 * (est.se * est.se + star.se * star.se).sqrt();
        rows.push(ImprovementRow {
            name: name.clone(),
            estimate: est.mean,
            se: est.se,
            diff,
            tolerance,
            pass: diff <= tolerance,
        });
    }
    Ok(ImprovementReport {
        optimal: star.mean,
        optimal_se: star.se,
        rows,
    })
}
