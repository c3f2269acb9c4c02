//! Monte Carlo and lattice solvers for multi-mode obliquely reflected
//! forward-backward SDEs with a random terminal time, and the optimal
//! switching problem they represent.
//!
//! The usual pipeline is:
//!
//! 1. load a [`ProblemSpec`] from a JSON document and [`validate_problem`];
//! 2. simulate a [`PathBundle`] with [`simulate_forward`];
//! 3. solve with [`solve_reflected`] or [`solve_penalized`];
//! 4. extract a [`Strategy`] and estimate its profit with [`estimate_profit`];
//! 5. cross-check against the lattice [`dp_solve`].

pub mod error;
pub mod expr;
pub mod instances;
pub mod model;
pub mod oracle;
pub mod paths;
pub mod penalized;
pub mod reflected;
pub mod regression;
pub mod rng;
pub mod solution;
pub mod switching;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use expr::{parse, EvalError, Expr, ParseError, Var};
pub use model::{
    effective_driver, lambda_window, validate_costs, validate_document, validate_lambda_window,
    validate_problem, ApplicationMode, Check, CoefficientSpec, DeclaredConstants, HorizonSpec,
    Issue, ProblemDocument, ProblemSpec, SwitchingCostMatrix, ValidationReport,
};
pub use oracle::{dp_solve, enumerate_strategies, evaluate_mode_map, Enumeration, LatticeModel};
pub use paths::{coarsen, girsanov_logweight, simulate_forward, BundleId, PathBundle, TimeGrid};
pub use penalized::{
    backward_step_penalized, cauchy_gap, cauchy_gap_per_mode, penalty_violation_norm,
    solve_penalized, PenaltyViolation,
};
pub use reflected::{
    domain_violation, reflect, skorokhod_residual, solve_reflected, solve_strategy_bsde,
    StrategyValue,
};
pub use regression::{condexp_fit, FittedFunction};
pub use solution::{BackwardSolution, Scheme};
pub use switching::{
    estimate_profit, extract_strategy, policy_improvement_check, Estimator, FeedbackRule,
    ImprovementReport, Perturbation, Policy, ProfitEstimate, Strategy, Switch,
};
