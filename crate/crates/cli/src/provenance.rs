//! `provenance.json` records written next to every command output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub experiment_name: String,
    pub seed: u64,
    pub config_hash: String,
    pub timestamp: u64,
    /// Input name to fingerprint or path.
    pub inputs: BTreeMap<String, String>,
    /// Free-form results such as losses or Dice.
    pub outputs: BTreeMap<String, serde_json::Value>,
    pub config: ExperimentConfig,
}

impl Provenance {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment_name: cfg.experiment_name.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    pub fn input(mut self, name: &str, value: impl ToString) -> Self {
        self.inputs.insert(name.to_string(), value.to_string());
        self
    }

    pub fn output(mut self, name: &str, value: impl Serialize) -> Self {
        self.outputs
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| otfseg::Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(PROVENANCE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| otfseg::Error::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(|e| otfseg::Error::corrupt(&path, e))?)
    }
}
