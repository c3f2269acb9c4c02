use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation failed with {0} issue(s)")]
    Validation(usize),

    /// Failure inside one of the solver modules, tagged with where it came from.
    #[error("{module}: {source}")]
    Solver {
        module: &'static str,
        #[source]
        source: obsw_core::Error,
    },

    #[error("{0}")]
    Check(String),

    #[error("oracle refused: {0}")]
    Oracle(#[source] obsw_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Validation(_) => 3,
            CliError::Solver { .. } | CliError::Check(_) => 4,
            CliError::Oracle(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

/// Attaches the solver module name to a core error.
pub(crate) fn in_module(module: &'static str) -> impl Fn(obsw_core::Error) -> CliError {
    move |source| CliError::Solver { module, source }
}

/// Oracle errors that mean "this problem is out of scope" become refusals.
pub(crate) fn oracle_error(e: obsw_core::Error) -> CliError {
    match e {
        obsw_core::Error::Unsupported(_) | obsw_core::Error::SearchSpace { .. } => CliError::Oracle(e),
        other => CliError::Solver {
            module: "oracle",
            source: other,
        },
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
