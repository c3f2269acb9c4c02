//! Experiment configuration: a problem document plus run parameters, with
//! command-line overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use obsw_core::{Estimator, ProblemDocument};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_PATHS: usize = 20_000;
pub const DEFAULT_LADDER: [u64; 3] = [10, 20, 40];
pub const DEFAULT_DEGREE: usize = 2;

/// Optional `"experiment"` section of a config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub ladder: Option<Vec<u64>>,
    pub degree: Option<usize>,
    pub estimator: Option<String>,
    pub oracle_n: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Values given on the command line; they win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub ladder: Option<Vec<u64>>,
    pub degree: Option<usize>,
    pub estimator: Option<String>,
    pub oracle_n: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Fully resolved run parameters. Everything that can change a numeric
/// output lives here and goes into the config hash; the output directory
/// does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub seed: u64,
    pub n_paths: usize,
    pub ladder: Vec<u64>,
    pub degree: usize,
    pub estimator: String,
    pub oracle_n: usize,
}

impl Experiment {
    pub fn estimator(&self) -> Result<Estimator> {
        self.estimator.parse().map_err(|e: obsw_core::Error| CliError::Config(e.to_string()))
    }

    /// Grid size paired with penalty index `n`: the smallest `N` with
    /// `n · T / N ≤ 1/2`.
    pub fn ladder_steps(&self, n: u64, t_cap: f64) -> usize {
        ((2.0 * n as f64 * t_cap).ceil() as usize).max(1)
    }

    fn check(&self, t_cap: f64) -> Result<()> {
        if self.n_paths < 2 {
            return Err(CliError::Config("n_paths must be at least 2".into()));
        }
        if self.ladder.is_empty() {
            return Err(CliError::Config("penalty ladder is empty".into()));
        }
        if self.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config(format!(
                "penalty ladder {:?} must be strictly increasing",
                self.ladder
            )));
        }
        for &n in &self.ladder {
            let steps = self.ladder_steps(n, t_cap);
            if n as f64 * t_cap / steps as f64 > 0.5 {
                return Err(CliError::Config(format!("ladder entry {n} violates n*dt <= 0.5 on {steps} steps")));
            }
        }
        if self.oracle_n == 0 {
            return Err(CliError::Config("oracle_n must be at least 1".into()));
        }
        self.estimator()?;
        Ok(())
    }
}

/// What gets hashed and recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub problem: ProblemDocument,
    pub experiment: Experiment,
}

impl ResolvedConfig {
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// A loaded configuration and the output directory it asks for.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub resolved: ResolvedConfig,
    pub out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

fn parse_json(path: &Path, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Splits a config file into the problem document and the experiment
/// section. The problem is either inline (top-level keys), an object under
/// `"problem"`, or a path under `"problem"` relative to the config file.
pub fn load_config_file(path: &Path) -> Result<(ProblemDocument, ExperimentSection)> {
    let mut value = parse_json(path, &read(path)?)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("{}: expected a JSON object", path.display())))?;
    let section = match obj.remove("experiment") {
        Some(v) => serde_json::from_value(v)
            .map_err(|e| CliError::Config(format!("{}: experiment: {e}", path.display())))?,
        None => ExperimentSection::default(),
    };
    let problem = match obj.remove("problem") {
        Some(Value::String(rel)) => {
            let target = path.parent().unwrap_or(Path::new(".")).join(rel);
            parse_json(&target, &read(&target)?)?
        }
        Some(inline @ Value::Object(_)) => inline,
        Some(_) => return Err(CliError::Config("`problem` must be a path or an object".into())),
        None => value,
    };
    let doc = serde_json::from_value(problem)
        .map_err(|e| CliError::Config(format!("{}: problem document: {e}", path.display())))?;
    Ok((doc, section))
}

pub fn resolve(doc: ProblemDocument, section: ExperimentSection, cli: Overrides) -> Result<RunConfig> {
    let experiment = Experiment {
        seed: cli.seed.or(section.seed).unwrap_or(DEFAULT_SEED),
        n_paths: cli.n_paths.or(section.n_paths).unwrap_or(DEFAULT_PATHS),
        ladder: cli.ladder.or(section.ladder).unwrap_or_else(|| DEFAULT_LADDER.to_vec()),
        degree: cli.degree.or(section.degree).unwrap_or(DEFAULT_DEGREE),
        estimator: cli
            .estimator
            .or(section.estimator)
            .unwrap_or_else(|| "controlled-drift".into()),
        oracle_n: cli.oracle_n.or(section.oracle_n).unwrap_or(doc.horizon.n_steps),
    };
    experiment.check(doc.horizon.t_cap)?;
    Ok(RunConfig {
        out: cli.out.or(section.out).unwrap_or_else(|| PathBuf::from("out")),
        resolved: ResolvedConfig {
            problem: doc,
            experiment,
        },
    })
}

pub fn load(path: &Path, cli: Overrides) -> Result<RunConfig> {
    let (doc, section) = load_config_file(path)?;
    resolve(doc, section, cli)
}
