//! CSV tables and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ResolvedConfig;
use crate::error::{CliError, Result};

/// Shortest round-trip representation; `NaN`/`inf` spelled out.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// In-memory table; written in one go so a failed run leaves no half file.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Collects output files and their digests for the manifest.
pub struct OutputDir {
    root: PathBuf,
    digests: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            digests: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.digests.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        self.write(name, &table.to_bytes())
    }

    pub fn finish(self, command: &str, config: &ResolvedConfig, grid: GridInfo) -> Result<Manifest> {
        let manifest = Manifest {
            tool: "obsw".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: obsw_core::VERSION.into(),
            command: command.into(),
            config_sha256: config.sha256(),
            seed: config.experiment.seed,
            n_paths: config.experiment.n_paths,
            grid,
            basis: Basis {
                family: "monomial in standardized state".into(),
                degree: config.experiment.degree,
            },
            config: config.clone(),
            outputs: self.digests,
        };
        let path = self.root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub t_cap: f64,
    pub n_steps: usize,
    /// Steps of the simulated bundle all solver grids were coarsened from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub family: String,
    pub degree: usize,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub n_paths: usize,
    pub grid: GridInfo,
    pub basis: Basis,
    pub config: ResolvedConfig,
    /// File name → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.config.sha256() != m.config_sha256 {
            return Err(CliError::Config(format!(
                "{}: recorded config hash does not match the embedded config",
                path.display()
            )));
        }
        Ok(m)
    }
}
