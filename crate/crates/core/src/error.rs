use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    /// Mismatched dimensions, grids or bundles.
    #[error("structural error: {0}")]
    Structural(String),

    /// A numeric parameter outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The problem document is incomplete or inconsistent.
    #[error("specification error: {0}")]
    Specification(String),

    #[error("coefficient `{coefficient}` failed for mode {mode} at step {step}, path {path}: {source}")]
    Coefficient {
        coefficient: &'static str,
        mode: usize,
        step: usize,
        path: usize,
        #[source]
        source: EvalError,
    },

    #[error("reflection did not reach a fixed point within {passes} passes (cost matrix violates the triangle inequality?)")]
    ReflectionDiverged { passes: usize },

    #[error("unsupported by the lattice oracle: {0}")]
    Unsupported(String),

    #[error("search space of {size_estimate:.3e} policies exceeds the enumeration budget of {budget}")]
    SearchSpace { size_estimate: f64, budget: u64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
