//! Problem definition: switching costs, coefficients, horizon, and the
//! validators for the structural hypotheses the solvers rely on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, BinOp, Expr, Var};

/// Switching cost matrix `C[i][j]`, row-major, modes indexed from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingCostMatrix {
    d: usize,
    c: Vec<f64>,
    /// Require the strict triangle inequality.
    pub strict: bool,
}

impl SwitchingCostMatrix {
    pub fn new(d: usize, row_major: Vec<f64>, strict: bool) -> Result<Self> {
        if d == 0 {
            return Err(Error::Structural("cost matrix needs at least one mode".into()));
        }
        if row_major.len() != d * d {
            return Err(Error::Structural(format!(
                "cost matrix has {} entries, expected {}x{}",
                row_major.len(),
                d,
                d
            )));
        }
        Ok(Self {
            d,
            c: row_major,
            strict,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], strict: bool) -> Result<Self> {
        let d = rows.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Structural(format!(
                "cost matrix row {} has {} entries, expected {d}",
                bad + 1,
                rows[bad].len()
            )));
        }
        Self::new(d, rows.concat(), strict)
    }

    /// Same cost between every pair of distinct modes.
    pub fn uniform(d: usize, cost: f64, strict: bool) -> Self {
        let c = (0..d * d)
            .map(|k| if k / d == k % d { 0.0 } else { cost })
            .collect();
        Self { d, c, strict }
    }

    #[inline]
    pub fn modes(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.d + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.c
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            d: self.d,
            c: self.c.iter().map(|v| v * factor).collect(),
            strict: self.strict,
        }
    }

    /// Relabel modes: new mode `k` is old mode `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.d;
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = self.get(perm[i], perm[j]);
            }
        }
        Self {
            d,
            c,
            strict: self.strict,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let d = self.d;
        for i in 0..d {
            for j in 0..d {
                let c = self.get(i, j);
                if !(c >= 0.0) || !c.is_finite() {
                    report.push(Issue::new(
                        Check::CostsNonNegative,
                        format!("C[{}][{}] = {c} is negative or not finite", i + 1, j + 1),
                    ));
                }
            }
            if self.get(i, i) != 0.0 {
                report.push(Issue::new(
                    Check::CostsZeroDiagonal,
                    format!("C[{0}][{0}] = {1} must be 0", i + 1, self.get(i, i)),
                ));
            }
        }
        for i in 0..d {
            for j in (0..d).filter(|&j| j != i) {
                for l in (0..d).filter(|&l| l != j) {
                    let lhs = self.get(i, j) + self.get(j, l);
                    let rhs = self.get(i, l);
                    let triple = (i + 1, j + 1, l + 1);
                    if !(lhs >= rhs) {
                        report.push(Issue::triple(
                            Check::CostsTriangle,
                            triple,
                            format!("C[{i1}][{j1}] + C[{j1}][{l1}] = {lhs} < C[{i1}][{l1}] = {rhs}", i1 = i + 1, j1 = j + 1, l1 = l + 1),
                        ));
                    } else if self.strict && !(lhs > rhs) {
                        report.push(Issue::triple(
                            Check::CostsStrictTriangle,
                            triple,
                            format!("C[{i1}][{j1}] + C[{j1}][{l1}] = {lhs} is not > C[{i1}][{l1}] = {rhs}", i1 = i + 1, j1 = j + 1, l1 = l + 1),
                        ));
                    }
                }
            }
        }
        report
    }
}

/// Structural validation of a cost matrix given as rows. A ragged or
/// non-square input is an error; otherwise every violated triple is listed.
pub fn validate_costs(rows: &[Vec<f64>], strict: bool) -> Result<ValidationReport> {
    Ok(SwitchingCostMatrix::from_rows(rows, strict)?.validate())
}

/// Hypothesis a validation issue refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Check {
    CostsNonNegative,
    CostsZeroDiagonal,
    CostsTriangle,
    CostsStrictTriangle,
    LambdaWindow,
    DeclaredConstants,
    SigmaFloor,
    SigmaModeIndependent,
    DriftBound,
    Expression,
    Structure,
}

impl Check {
    pub fn label(self) -> &'static str {
        match self {
            Check::CostsNonNegative => "Hypothesis 3.1(i)",
            Check::CostsZeroDiagonal => "Hypothesis 3.1(i) diagonal",
            Check::CostsTriangle => "Hypothesis 3.1(ii)",
            Check::CostsStrictTriangle => "Hypothesis k'(ii)",
            Check::LambdaWindow => "(H6)",
            Check::DeclaredConstants => "(H3)-(H5)",
            Check::SigmaFloor => "Hypothesis 5.1(iv)",
            Check::SigmaModeIndependent => "Hypothesis 5.1(iv) mode-independent sigma",
            Check::DriftBound => "Hypothesis 5.1(v)",
            Check::Expression => "(H1) expression",
            Check::Structure => "structure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub check: Check,
    /// 1-based `(i, j, l)` for triangle violations.
    pub triple: Option<(usize, usize, usize)>,
    pub message: String,
}

impl Issue {
    pub fn new(check: Check, message: impl Into<String>) -> Self {
        Self {
            check,
            triple: None,
            message: message.into(),
        }
    }

    fn triple(check: Check, triple: (usize, usize, usize), message: String) -> Self {
        Self {
            check,
            triple: Some(triple),
            message,
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.check.label(), self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn push(&mut self, issue: Issue) {
        self.issues.push(issue);
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.issues.extend(other.issues);
    }

    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.issues.iter().filter_map(|i| i.triple).collect()
    }
}

/// Default constant in the lower end of the λ window: `u_max + 5 u_max²`.
pub fn default_c_u(u_max: f64) -> f64 {
    u_max + 5.0 * u_max * u_max
}

/// Open interval `(lower, upper)` of admissible discount rates.
pub fn lambda_window(
    mu1: f64,
    mu2: f64,
    u_max: f64,
    epsilon: f64,
    rho: f64,
    c_u: Option<f64>,
) -> Result<(f64, f64)> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Parameter(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(u_max >= 0.0) {
        return Err(Error::Parameter(format!("u_max must be non-negative, got {u_max}")));
    }
    let c_u = c_u.unwrap_or_else(|| default_c_u(u_max));
    let lower = c_u / epsilon + 2.0 * mu2 * u_max + 2.0 * u_max * u_max / rho + 2.0 * epsilon;
    // The forward estimate's Lipschitz constant is taken as u_max.
    let upper = -2.0 * mu1 - u_max;
    Ok((lower, upper))
}

pub fn validate_lambda_window(
    mu1: f64,
    mu2: f64,
    u_max: f64,
    epsilon: f64,
    rho: f64,
    lambda: f64,
) -> Result<bool> {
    let (lo, hi) = lambda_window(mu1, mu2, u_max, epsilon, rho, None)?;
    Ok(lo < lambda && lambda < hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApplicationMode {
    General,
    Switching,
}

/// Constants declared alongside the coefficients. They are checked for
/// consistency with each other, never against the expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub mu1: f64,
    pub mu2: f64,
    #[serde(default)]
    pub mu3: f64,
    #[serde(default)]
    pub k2: f64,
    pub u_max: f64,
    pub epsilon: f64,
    pub rho: f64,
    #[serde(default)]
    pub strict_costs: bool,
    /// Rate used for the λ-window check; falls back to the horizon's rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Override for the window constant, see [`default_c_u`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CoefficientSpec {
    pub b: Vec<Expr>,
    pub sigma: Vec<Expr>,
    pub f: Option<Vec<Expr>>,
    pub l: Option<Vec<Expr>>,
    pub g: Expr,
    pub declared: DeclaredConstants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSpec {
    pub t_cap: f64,
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_hi: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
}

impl HorizonSpec {
    /// Whether `x` lies strictly inside the continuation interval.
    #[inline]
    pub fn inside(&self, x: f64) -> bool {
        self.exit_lo.is_none_or(|lo| x > lo) && self.exit_hi.is_none_or(|hi| x < hi)
    }

    /// `e^{λ T_cap}`: weight of the truncated tail under the discounted norm.
    pub fn tail_weight(&self) -> f64 {
        (self.lambda * self.t_cap).exp()
    }

    fn check(&self) -> Result<()> {
        if !(self.t_cap > 0.0 && self.t_cap.is_finite()) {
            return Err(Error::Specification(format!("t_cap must be positive, got {}", self.t_cap)));
        }
        if self.n_steps == 0 {
            return Err(Error::Specification("n_steps must be at least 1".into()));
        }
        if let (Some(lo), Some(hi)) = (self.exit_lo, self.exit_hi) {
            if !(lo < hi) {
                return Err(Error::Specification(format!("exit_lo {lo} must be below exit_hi {hi}")));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::Specification("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Cost matrix as it appears in the problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostsDoc {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsDoc {
    pub b: Vec<String>,
    pub sigma: Vec<String>,
    #[serde(default)]
    pub f: Option<Vec<String>>,
    #[serde(default)]
    pub l: Option<Vec<String>>,
    pub g: String,
}

/// JSON problem document, as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub modes: usize,
    pub x0: f64,
    /// Initial mode, 1-based.
    pub i0: usize,
    pub costs: CostsDoc,
    pub horizon: HorizonSpec,
    pub coefficients: CoefficientsDoc,
    pub hypothesis: DeclaredConstants,
    pub application_mode: ApplicationMode,
}

impl ProblemDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serialises")
    }

    fn cost_matrix(&self) -> Result<SwitchingCostMatrix> {
        let strict = self.hypothesis.strict_costs;
        let m = match &self.costs {
            CostsDoc::Flat(v) => SwitchingCostMatrix::new(self.modes, v.clone(), strict)?,
            CostsDoc::Rows(r) => SwitchingCostMatrix::from_rows(r, strict)?,
        };
        if m.modes() != self.modes {
            return Err(Error::Structural(format!(
                "cost matrix is {0}x{0} but modes = {1}",
                m.modes(),
                self.modes
            )));
        }
        Ok(m)
    }
}

/// Fully parsed switching problem. Modes are 0-based internally.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub x0: f64,
    pub i0: usize,
    pub costs: SwitchingCostMatrix,
    pub coeffs: CoefficientSpec,
    pub horizon: HorizonSpec,
    pub application_mode: ApplicationMode,
    driver: Vec<Expr>,
    kernel: Vec<Expr>,
}

const FORWARD_VARS: &[Var] = &[Var::T, Var::X];
const DRIVER_VARS: &[Var] = &[Var::T, Var::X, Var::Y, Var::Z];
const TERMINAL_VARS: &[Var] = &[Var::X];

fn parse_family(
    name: &'static str,
    sources: &[String],
    d: usize,
    allowed: &[Var],
) -> Result<Vec<Expr>> {
    if sources.len() != d && sources.len() != 1 {
        return Err(Error::Structural(format!(
            "coefficient `{name}` has {} expressions, expected {d} (or 1 shared)",
            sources.len()
        )));
    }
    let parsed = sources
        .iter()
        .map(|s| parse_checked(name, s, allowed))
        .collect::<Result<Vec<_>>>()?;
    Ok(if parsed.len() == d {
        parsed
    } else {
        vec![parsed[0].clone(); d]
    })
}

fn parse_checked(name: &'static str, source: &str, allowed: &[Var]) -> Result<Expr> {
    let e = expr::parse(source)?;
    if let Some(v) = e.variables().into_iter().find(|v| !allowed.contains(v)) {
        return Err(Error::Specification(format!(
            "coefficient `{name}` = `{source}` uses `{}`; permitted variables are {:?}",
            v.name(),
            allowed.iter().map(|v| v.name()).collect::<Vec<_>>()
        )));
    }
    Ok(e)
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&ProblemDocument::from_json(text)?)
    }

    pub fn from_document(doc: &ProblemDocument) -> Result<Self> {
        let d = doc.modes;
        if d == 0 {
            return Err(Error::Structural("modes must be at least 1".into()));
        }
        if doc.i0 == 0 || doc.i0 > d {
            return Err(Error::Specification(format!("i0 = {} is not in 1..={d}", doc.i0)));
        }
        if !doc.x0.is_finite() {
            return Err(Error::Specification("x0 must be finite".into()));
        }
        doc.horizon.check()?;
        let costs = doc.cost_matrix()?;
        let c = &doc.coefficients;
        let coeffs = CoefficientSpec {
            b: parse_family("b", &c.b, d, FORWARD_VARS)?,
            sigma: parse_family("sigma", &c.sigma, d, FORWARD_VARS)?,
            f: c.f
                .as_ref()
                .map(|f| parse_family("f", f, d, DRIVER_VARS))
                .transpose()?,
            l: c.l
                .as_ref()
                .map(|l| parse_family("l", l, d, FORWARD_VARS))
                .transpose()?,
            g: parse_checked("g", &c.g, TERMINAL_VARS)?,
            declared: doc.hypothesis.clone(),
        };
        Self::new(doc.x0, doc.i0 - 1, costs, coeffs, doc.horizon.clone(), doc.application_mode)
    }

    pub fn new(
        x0: f64,
        i0: usize,
        costs: SwitchingCostMatrix,
        coeffs: CoefficientSpec,
        horizon: HorizonSpec,
        application_mode: ApplicationMode,
    ) -> Result<Self> {
        let d = costs.modes();
        if i0 >= d {
            return Err(Error::Specification(format!("initial mode {} out of range", i0 + 1)));
        }
        for (name, fam) in [("b", Some(&coeffs.b)), ("sigma", Some(&coeffs.sigma)), ("f", coeffs.f.as_ref()), ("l", coeffs.l.as_ref())] {
            if let Some(fam) = fam {
                if fam.len() != d {
                    return Err(Error::Structural(format!("coefficient `{name}` has {} modes, expected {d}", fam.len())));
                }
            }
        }
        horizon.check()?;
        let mut spec = Self {
            x0,
            i0,
            costs,
            coeffs,
            horizon,
            application_mode,
            driver: Vec::new(),
            kernel: Vec::new(),
        };
        spec.kernel = girsanov_kernel(&spec.coeffs);
        spec.driver = effective_driver(&spec)?
            .f
            .expect("effective driver always present");
        Ok(spec)
    }

    #[inline]
    pub fn modes(&self) -> usize {
        self.costs.modes()
    }

    pub fn is_switching(&self) -> bool {
        self.application_mode == ApplicationMode::Switching
    }

    /// Driver actually integrated by the backward schemes.
    pub fn driver(&self) -> &[Expr] {
        &self.driver
    }

    /// Girsanov kernel `θ_i = σ⁻¹ b_i`.
    pub fn kernel(&self) -> &[Expr] {
        &self.kernel
    }

    /// Drift of the simulated forward process. In switching mode the
    /// forward process lives under the reference measure and is driftless;
    /// the drift enters through the driver instead.
    pub fn forward_drift(&self, mode: usize) -> Option<&Expr> {
        match self.application_mode {
            ApplicationMode::General => Some(&self.coeffs.b[mode]),
            ApplicationMode::Switching => None,
        }
    }

    pub fn running_reward(&self) -> Option<&[Expr]> {
        self.coeffs.l.as_deref()
    }

    /// Rate used for the λ-window check.
    pub fn window_lambda(&self) -> f64 {
        self.coeffs.declared.lambda.unwrap_or(self.horizon.lambda)
    }

    /// Constant diffusion coefficient shared by all modes, if any.
    pub fn constant_sigma(&self) -> Option<f64> {
        let s0 = self.coeffs.sigma[0].constant_value()?;
        self.coeffs
            .sigma
            .iter()
            .all(|s| s.constant_value() == Some(s0))
            .then_some(s0)
    }

    pub fn sigma_mode_independent(&self) -> bool {
        self.coeffs.sigma.iter().all(|s| *s == self.coeffs.sigma[0])
    }

    /// Copy with modes relabelled: new mode `k` is old mode `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &Vec<Expr>| perm.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        let coeffs = CoefficientSpec {
            b: pick(&self.coeffs.b),
            sigma: pick(&self.coeffs.sigma),
            f: self.coeffs.f.as_ref().map(pick),
            l: self.coeffs.l.as_ref().map(pick),
            g: self.coeffs.g.clone(),
            declared: self.coeffs.declared.clone(),
        };
        let i0 = perm.iter().position(|&k| k == self.i0).expect("permutation");
        Self::new(
            self.x0,
            i0,
            self.costs.permuted(perm),
            coeffs,
            self.horizon.clone(),
            self.application_mode,
        )
        .expect("permutation preserves validity")
    }

    pub fn with_costs(&self, costs: SwitchingCostMatrix) -> Result<Self> {
        Self::new(self.x0, self.i0, costs, self.coeffs.clone(), self.horizon.clone(), self.application_mode)
    }

    pub fn with_horizon(&self, horizon: HorizonSpec) -> Result<Self> {
        Self::new(self.x0, self.i0, self.costs.clone(), self.coeffs.clone(), horizon, self.application_mode)
    }
}

fn girsanov_kernel(coeffs: &CoefficientSpec) -> Vec<Expr> {
    coeffs
        .b
        .iter()
        .zip(&coeffs.sigma)
        .map(|(b, s)| {
            if b.is_zero() {
                Expr::constant(0.0)
            } else if s.constant_value() == Some(1.0) {
                b.clone()
            } else {
                Expr::binary(BinOp::Div, b.clone(), s.clone())
            }
        })
        .collect()
}

/// Driver of the backward system. In switching mode the driver is built
/// from the running reward and the drift, `f = l + z σ⁻¹ b`, and never
/// reads `y`; in general mode the declared `f` is returned unchanged.
pub fn effective_driver(spec: &ProblemSpec) -> Result<CoefficientSpec> {
    let mut out = spec.coeffs.clone();
    match spec.application_mode {
        ApplicationMode::General => {
            if out.f.is_none() {
                return Err(Error::Specification("general mode requires a driver `f`".into()));
            }
        }
        ApplicationMode::Switching => {
            let l = spec.coeffs.l.as_ref().ok_or_else(|| {
                Error::Specification("switching mode requires a running reward `l`".into())
            })?;
            let kernel = girsanov_kernel(&spec.coeffs);
            let f = l
                .iter()
                .zip(kernel)
                .map(|(l, theta)| {
                    if theta.is_zero() {
                        l.clone()
                    } else {
                        Expr::binary(BinOp::Add, l.clone(), Expr::binary(BinOp::Mul, Expr::var(Var::Z), theta))
                    }
                })
                .collect();
            out.f = Some(f);
        }
    }
    Ok(out)
}

/// Runs every hypothesis validator on a parsed problem.
pub fn validate_problem(spec: &ProblemSpec) -> ValidationReport {
    let mut report = spec.costs.validate();
    let h = &spec.coeffs.declared;
    let finite = [h.mu1, h.mu2, h.mu3, h.k2, h.u_max, h.epsilon, h.rho];
    if finite.iter().any(|v| !v.is_finite()) {
        report.push(Issue::new(Check::DeclaredConstants, "declared constants must be finite"));
    }
    if !(h.u_max >= 0.0) {
        report.push(Issue::new(Check::DeclaredConstants, format!("u_max = {} must be non-negative", h.u_max)));
    }
    if !(h.k2 >= 0.0) {
        report.push(Issue::new(Check::DeclaredConstants, format!("k2 = {} must be non-negative", h.k2)));
    }
    let lambda = spec.window_lambda();
    match lambda_window(h.mu1, h.mu2, h.u_max, h.epsilon, h.rho, h.c_u) {
        Ok((lo, hi)) => {
            if !(lo < lambda && lambda < hi) {
                report.push(Issue::new(
                    Check::LambdaWindow,
                    format!("lambda = {lambda} outside the admissible window ({lo}, {hi})"),
                ));
            }
        }
        Err(e) => report.push(Issue::new(Check::LambdaWindow, e.to_string())),
    }
    if spec.is_switching() {
        if !spec.sigma_mode_independent() {
            report.push(Issue::new(Check::SigmaModeIndependent, "switching mode requires the same sigma for every mode"));
        }
        match h.sigma_min {
            Some(floor) if floor > 0.0 => {
                if let Some(s) = spec.coeffs.sigma[0].constant_value() {
                    if s.abs() < floor {
                        report.push(Issue::new(Check::SigmaFloor, format!("|sigma| = {} below declared floor {floor}", s.abs())));
                    }
                }
            }
            _ => report.push(Issue::new(Check::SigmaFloor, "switching mode requires a declared sigma_min > 0")),
        }
        match h.b_bound {
            Some(bound) if bound >= 0.0 => {
                for (i, b) in spec.coeffs.b.iter().enumerate() {
                    if let Some(v) = b.constant_value() {
                        if v.abs() > bound {
                            report.push(Issue::new(Check::DriftBound, format!("|b| = {} for mode {} exceeds declared bound {bound}", v.abs(), i + 1)));
                        }
                    }
                }
            }
            _ => report.push(Issue::new(Check::DriftBound, "switching mode requires a declared b_bound")),
        }
        if spec.coeffs.l.is_none() {
            report.push(Issue::new(Check::Expression, "switching mode requires a running reward `l`"));
        }
    }
    report
}

/// Validates a raw document: expression and structure problems are
/// itemised instead of aborting at the first one.
pub fn validate_document(doc: &ProblemDocument) -> ValidationReport {
    let mut report = ValidationReport::default();
    let c = &doc.coefficients;
    let mut families: Vec<(&str, &Vec<String>, &[Var])> =
        vec![("b", &c.b, FORWARD_VARS), ("sigma", &c.sigma, FORWARD_VARS)];
    if let Some(f) = &c.f {
        families.push(("f", f, DRIVER_VARS));
    }
    if let Some(l) = &c.l {
        families.push(("l", l, FORWARD_VARS));
    }
    let g = vec![c.g.clone()];
    families.push(("g", &g, TERMINAL_VARS));
    let mut expressions_ok = true;
    for (name, sources, allowed) in families {
        for (k, s) in sources.iter().enumerate() {
            let name: &'static str = match name {
                "b" => "b",
                "sigma" => "sigma",
                "f" => "f",
                "l" => "l",
                _ => "g",
            };
            if let Err(e) = parse_checked(name, s, allowed) {
                expressions_ok = false;
                report.push(Issue::new(Check::Expression, format!("{name}[{}] = `{s}`: {e}", k + 1)));
            }
        }
    }
    if !expressions_ok {
        if let Ok(costs) = doc.cost_matrix() {
            report.extend(costs.validate());
        }
        return report;
    }
    match ProblemSpec::from_document(doc) {
        Ok(spec) => report.extend(validate_problem(&spec)),
        Err(e) => {
            if let Ok(costs) = doc.cost_matrix() {
                report.extend(costs.validate());
            }
            report.push(Issue::new(Check::Structure, e.to_string()));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_costs_weak_is_valid() {
        let r = validate_costs(&[vec![0.0, 0.0], vec![0.0, 0.0]], false).unwrap();
        assert!(r.is_valid());
    }

    #[test]
    fn zero_costs_strict_fails_on_return_trip() {
        let r = validate_costs(&[vec![0.0, 0.0], vec![0.0, 0.0]], true).unwrap();
        assert!(!r.is_valid());
        assert!(r.triples().contains(&(1, 2, 1)));
        assert!(r.issues.iter().all(|i| i.check == Check::CostsStrictTriangle));
    }

    #[test]
    fn constructed_triangle_violation() {
        let rows = vec![vec![0.0, 1.0, 5.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]];
        let r = validate_costs(&rows, false).unwrap();
        assert_eq!(r.triples(), vec![(1, 2, 3)]);
        assert_eq!(r.issues[0].check, Check::CostsTriangle);
    }

    #[test]
    fn ragged_matrix_is_structural_error() {
        assert!(matches!(validate_costs(&[vec![0.0, 1.0], vec![0.0]], false), Err(Error::Structural(_))));
        assert!(matches!(validate_costs(&[], false), Err(Error::Structural(_))));
    }

    #[test]
    fn negative_cost_flagged() {
        let r = validate_costs(&[vec![0.0, -1.0], vec![1.0, 0.0]], false).unwrap();
        assert!(r.issues.iter().any(|i| i.check == Check::CostsNonNegative));
    }

    #[test]
    fn lambda_window_examples() {
        assert!(!validate_lambda_window(-2.0, 0.0, 0.5, 0.1, 0.5, 4.0).unwrap());
        assert!(validate_lambda_window(-2.0, 0.0, 0.0, 0.1, 0.5, 1.0).unwrap());
        let (lo, hi) = lambda_window(0.0, 0.0, 1.0, 0.1, 0.5, None).unwrap();
        assert!(lo >= hi);
        for lambda in [-10.0, 0.0, 0.5, 2.0, 100.0] {
            assert!(!validate_lambda_window(0.0, 0.0, 1.0, 0.1, 0.5, lambda).unwrap());
        }
    }

    #[test]
    fn lambda_window_parameter_errors() {
        assert!(matches!(validate_lambda_window(-2.0, 0.0, 0.0, 0.0, 0.5, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(validate_lambda_window(-2.0, 0.0, 0.0, 0.1, 1.0, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(validate_lambda_window(-2.0, 0.0, 0.0, 0.1, 0.0, 1.0), Err(Error::Parameter(_))));
    }

    pub(crate) fn switching_spec(l: &[&str], b: &[&str], sigma: &str) -> ProblemSpec {
        let d = l.len();
        let doc = ProblemDocument {
            modes: d,
            x0: 1.0,
            i0: 1,
            costs: CostsDoc::Flat(SwitchingCostMatrix::uniform(d, 0.1, true).as_slice().to_vec()),
            horizon: HorizonSpec { t_cap: 1.0, n_steps: 10, exit_lo: None, exit_hi: None, lambda: 0.0 },
            coefficients: CoefficientsDoc {
                b: b.iter().map(|s| s.to_string()).collect(),
                sigma: vec![sigma.to_string()],
                f: None,
                l: Some(l.iter().map(|s| s.to_string()).collect()),
                g: "x".into(),
            },
            hypothesis: DeclaredConstants {
                mu1: -2.0,
                mu2: 0.0,
                mu3: 0.0,
                k2: 0.0,
                u_max: 0.0,
                epsilon: 0.1,
                rho: 0.5,
                strict_costs: true,
                lambda: Some(1.0),
                c_u: None,
                sigma_min: Some(0.1),
                b_bound: Some(1.0),
            },
            application_mode: ApplicationMode::Switching,
        };
        ProblemSpec::from_document(&doc).unwrap()
    }

    #[test]
    fn effective_driver_examples() {
        let spec = switching_spec(&["0"], &["0"], "1");
        let f = &effective_driver(&spec).unwrap().f.unwrap()[0];
        assert_eq!(f.eval(0.3, 2.0, 1.0, 4.0).unwrap(), 0.0);

        let spec = switching_spec(&["x"], &["0"], "1");
        let f = &effective_driver(&spec).unwrap().f.unwrap()[0];
        assert_eq!(f.eval(0.0, 2.0, 0.0, 5.0).unwrap(), 2.0);

        let spec = switching_spec(&["x"], &["0.3"], "1");
        let f = &effective_driver(&spec).unwrap().f.unwrap()[0];
        assert!((f.eval(0.0, 2.0, 0.0, 1.0).unwrap() - 2.3).abs() < 1e-15);
    }

    #[test]
    fn effective_driver_scales_drift_by_inverse_sigma() {
        let spec = switching_spec(&["x"], &["0.2"], "0.25");
        let f = &spec.driver()[0];
        assert!((f.eval(0.0, 1.0, 0.0, 1.0).unwrap() - 1.8).abs() < 1e-15);
    }

    #[test]
    fn switching_without_reward_is_specification_error() {
        let mut spec = switching_spec(&["x"], &["0.2"], "0.25");
        spec.coeffs.l = None;
        assert!(matches!(effective_driver(&spec), Err(Error::Specification(_))));
    }

    #[test]
    fn general_mode_returns_declared_driver() {
        let mut spec = switching_spec(&["x"], &["0.2"], "0.25");
        spec.application_mode = ApplicationMode::General;
        spec.coeffs.f = Some(vec![expr::parse("-y").unwrap()]);
        let out = effective_driver(&spec).unwrap();
        assert_eq!(out.f.unwrap()[0], expr::parse("-y").unwrap());
    }

    #[test]
    fn variable_permissions_enforced() {
        let mut doc = ProblemDocument::from_json(DOC).unwrap();
        doc.coefficients.b = vec!["y".into()];
        assert!(matches!(ProblemSpec::from_document(&doc), Err(Error::Specification(_))));
        let mut doc = ProblemDocument::from_json(DOC).unwrap();
        doc.coefficients.g = "t".into();
        assert!(ProblemSpec::from_document(&doc).is_err());
        let report = validate_document(&doc);
        assert!(report.issues.iter().any(|i| i.check == Check::Expression));
    }

    const DOC: &str = r#"{
        "modes": 1, "x0": 0.5, "i0": 1, "costs": [0],
        "horizon": {"t_cap": 1, "n_steps": 4, "lambda": 0},
        "coefficients": {"b": ["0"], "sigma": ["0.1"], "f": ["-y"], "l": null, "g": "x"},
        "hypothesis": {"mu1": -2, "mu2": 0, "mu3": 0, "k2": 0, "u_max": 0,
                       "epsilon": 0.1, "rho": 0.5, "strict_costs": false, "lambda": 1},
        "application_mode": "general"
    }"#;

    #[test]
    fn document_parses_and_validates() {
        let spec = ProblemSpec::from_json(DOC).unwrap();
        assert_eq!(spec.modes(), 1);
        assert!(validate_problem(&spec).is_valid());
        assert_eq!(spec.horizon.tail_weight(), 1.0);
    }

    #[test]
    fn lambda_outside_window_cites_h6() {
        let mut doc = ProblemDocument::from_json(DOC).unwrap();
        doc.hypothesis.lambda = Some(10.0);
        let r = validate_document(&doc);
        assert!(r.issues.iter().any(|i| i.check == Check::LambdaWindow));
        assert_eq!(Check::LambdaWindow.label(), "(H6)");
    }

    fn arb_valid_costs() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..5).prop_flat_map(|d| {
            (Just(d), proptest::collection::vec(0.0f64..3.0, d * d)).prop_map(|(d, raw)| {
                let mut c = raw;
                for i in 0..d {
                    c[i * d + i] = 0.0;
                }
                // Shortest-path closure makes the triangle inequality hold.
                for k in 0..d {
                    for i in 0..d {
                        for j in 0..d {
                            let via = c[i * d + k] + c[k * d + j];
                            if via < c[i * d + j] {
                                c[i * d + j] = via;
                            }
                        }
                    }
                }
                (d, c)
            })
        })
    }

    proptest! {
        #[test]
        fn validity_invariant_under_relabelling((d, c) in arb_valid_costs(), seed in 0u64..1000, bump in 0.0f64..5.0) {
            let mut c = c;
            if d > 1 {
                // Occasionally break the inequality to exercise the invalid side.
                c[1] += bump;
            }
            let m = SwitchingCostMatrix::new(d, c, false).unwrap();
            let mut perm: Vec<usize> = (0..d).collect();
            let mut s = seed;
            for i in (1..d).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a = m.validate();
            let b = m.permuted(&perm).validate();
            prop_assert_eq!(a.is_valid(), b.is_valid());
            prop_assert_eq!(a.issues.len(), b.issues.len());
            let mut mapped: Vec<_> = b.triples().into_iter()
                .map(|(i, j, l)| (perm[i - 1] + 1, perm[j - 1] + 1, perm[l - 1] + 1))
                .collect();
            let mut orig = a.triples();
            mapped.sort();
            orig.sort();
            prop_assert_eq!(mapped, orig);
        }

        #[test]
        fn single_mode_always_valid(strict in any::<bool>()) {
            prop_assert!(SwitchingCostMatrix::new(1, vec![0.0], strict).unwrap().validate().is_valid());
        }

        #[test]
        fn lambda_window_monotone(mu1 in -5.0f64..0.0, mu2 in -1.0f64..1.0, u in 0.0f64..0.5,
                                  eps in 0.01f64..1.0, rho in 0.05f64..0.95, lambda in -5.0f64..15.0, frac in 0.0f64..1.0) {
            if validate_lambda_window(mu1, mu2, u, eps, rho, lambda).unwrap() {
                let (_, hi) = lambda_window(mu1, mu2, u, eps, rho, None).unwrap();
                let lp = lambda + frac * (hi - lambda);
                if lp < hi {
                    prop_assert!(validate_lambda_window(mu1, mu2, u, eps, rho, lp).unwrap());
                }
            }
        }

        #[test]
        fn switching_driver_ignores_y(x in -3.0f64..3.0, z in -3.0f64..3.0, y1 in -10.0f64..10.0, y2 in -10.0f64..10.0) {
            let spec = switching_spec(&["x", "-x"], &["0.2", "-0.2"], "0.25");
            for f in spec.driver() {
                prop_assert_eq!(f.eval(0.5, x, y1, z).unwrap().to_bits(), f.eval(0.5, x, y2, z).unwrap().to_bits());
            }
        }
    }
}
