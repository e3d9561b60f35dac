//! Run manifests: enough to rerun a command and check that its outputs match.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use gridcox::config::RunConfig;

use crate::{sha256_hex, CliResult};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputFile>,
    pub parameters: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    pub fn new(command: &str, threads: usize) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("gridcox-cli", env!("CARGO_PKG_VERSION"));
        versions.insert("gridcox", gridcox::VERSION);
        Manifest {
            command: command.into(),
            versions,
            threads,
            config_sha256: None,
            config: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            parameters: BTreeMap::new(),
        }
    }

    /// Records the effective configuration; the hash covers its compact JSON form.
    pub fn config(mut self, cfg: &RunConfig) -> CliResult<Self> {
        let text = serde_json::to_string(cfg)?;
        self.config_sha256 = Some(sha256_hex(text.as_bytes()));
        self.seeds.insert("search".into(), cfg.seeds.search);
        self.seeds.insert("posterior".into(), cfg.seeds.posterior);
        self.config = Some(cfg.clone());
        Ok(self)
    }

    pub fn input(mut self, path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputFile { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(self)
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn param<T: Serialize>(mut self, name: &str, value: T) -> Self {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.parameters.insert(name.into(), v);
        self
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
