//! Library side of the `obsw` command-line tool: configuration loading,
//! the subcommands and their file outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{load, resolve, Experiment, Overrides, ResolvedConfig, RunConfig};
pub use error::{CliError, Result};
pub use output::Manifest;

/// Sizes the global rayon pool from `OBSW_THREADS`; unset or empty leaves
/// rayon's default (one worker per core).
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("OBSW_THREADS") else {
        return Ok(());
    };
    if raw.trim().is_empty() {
        return Ok(());
    }
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("OBSW_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}
