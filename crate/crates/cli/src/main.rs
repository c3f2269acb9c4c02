use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obsw_cli::{commands, config, CliError, Manifest, Overrides, RunConfig};

/// Reflected FBSDE and optimal switching solvers.
#[derive(Parser)]
#[command(name = "obsw", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the cost matrix, λ window, expressions and switching-mode requirements.
    Validate(Common),
    /// Reflected solve plus the penalty ladder with convergence diagnostics.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Also write the simulated path bundle in binary form.
        #[arg(long, value_name = "PATH")]
        dump_paths: Option<PathBuf>,
    },
    /// Lattice dynamic programming (and exhaustive enumeration for small N).
    Oracle(Common),
    /// Monte Carlo solvers side by side with the lattice references.
    Compare(Common),
    /// Extract the switching strategy and check it against alternatives.
    Policy(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config: a problem document with an optional "experiment" section.
    #[arg(long, value_name = "PATH", required_unless_present = "from_manifest")]
    config: Option<PathBuf>,
    /// Re-run exactly the configuration recorded in a manifest.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["config", "seed", "paths", "ladder", "degree", "estimator", "oracle_n"])]
    from_manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<u32>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Strictly increasing penalty indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<u64>>,
    /// Polynomial degree of the regression basis.
    #[arg(long)]
    degree: Option<usize>,
    /// Profit estimator: controlled-drift or girsanov.
    #[arg(long)]
    estimator: Option<String>,
    /// Number of lattice steps for the oracle.
    #[arg(long)]
    oracle_n: Option<usize>,
}

impl Common {
    fn load(self) -> Result<RunConfig, CliError> {
        if let Some(path) = self.from_manifest {
            let m = Manifest::load(&path)?;
            return Ok(RunConfig {
                resolved: m.config,
                out: self.out.unwrap_or_else(|| PathBuf::from("out")),
            });
        }
        let path = self.config.expect("clap enforces --config or --from-manifest");
        config::load(
            &path,
            Overrides {
                seed: self.seed,
                n_paths: self.paths.map(|p| p as usize),
                ladder: self.ladder,
                degree: self.degree,
                estimator: self.estimator,
                oracle_n: self.oracle_n,
                out: self.out,
            },
        )
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    obsw_cli::init_threads()?;
    match cli.command {
        Command::Validate(c) => {
            let (report, text) = commands::validate(&c.load()?);
            print!("{text}");
            if report.is_valid() {
                Ok(String::new())
            } else {
                Err(CliError::Validation(report.issues.len()))
            }
        }
        Command::Solve { common, dump_paths } => commands::solve(&common.load()?, dump_paths.as_deref()),
        Command::Oracle(c) => commands::oracle(&c.load()?),
        Command::Compare(c) => commands::compare(&c.load()?),
        Command::Policy(c) => commands::policy(&c.load()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
