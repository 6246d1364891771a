//! Experiment configuration: one TOML document with a section per module.
//!
//! Precedence, highest first: command-line flags, the config file, built-in
//! desk-scale defaults. The top-level `seed` is copied into every section
//! that takes one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use otfseg::baselines::TentConfig;
use otfseg::data::{ShiftSpec, SynthSpec};
use otfseg::dpg::DpgConfig;
use otfseg::model::ArchConfig;
use otfseg::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    /// Relative paths resolve against `output_dir`.
    pub source: PathBuf,
    pub target: PathBuf,
    /// Root holding one dataset per prior-generator domain.
    pub dpg_corpus: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            source: "data/source".into(),
            target: "data/target".into(),
            dpg_corpus: "data/corpus".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub source: SynthSpec,
    /// Shift preset producing the target domain.
    pub target_shift: String,
    /// One corpus domain per preset.
    pub corpus_shifts: Vec<String>,
    pub corpus_per_domain: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            source: SynthSpec::default(),
            target_shift: "strong".into(),
            corpus_shifts: vec!["identity".into(), "dark".into(), "blurred".into()],
            corpus_per_domain: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpgGate {
    /// Held-out share of the corpus used for the reconstruction check.
    pub held_out_fraction: f64,
    /// Trained MSE must fall below this multiple of the untrained MSE.
    pub max_mse_ratio: f64,
    /// Fail the command when the ratio is not met.
    pub enforce: bool,
}

impl Default for DpgGate {
    fn default() -> Self {
        Self {
            held_out_fraction: 0.2,
            max_mse_ratio: 0.2,
            enforce: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub synth: SynthSection,
    pub arch: ArchConfig,
    pub dpg: DpgConfig,
    pub dpg_train: TrainConfig,
    pub dpg_gate: DpgGate,
    pub train: TrainConfig,
    pub tent: TentConfig,
    /// Extra named shifts; these override built-in presets of the same name.
    pub shifts: BTreeMap<String, ShiftSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dpg = DpgConfig::default();
        Self {
            experiment_name: "desk".into(),
            seed: 0,
            output_dir: "otfseg-run".into(),
            data: DataPaths::default(),
            synth: SynthSection::default(),
            arch: ArchConfig {
                base_channels: 8,
                convs_per_block: 1,
                code_channels: dpg.code_channels,
                ..ArchConfig::default()
            },
            dpg,
            dpg_train: TrainConfig {
                epochs: 10,
                lr_max: 3e-3,
                lr_min: 1e-4,
                ..TrainConfig::published_2d()
            },
            dpg_gate: DpgGate::default(),
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::desk()
            },
            tent: TentConfig::default(),
            shifts: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| otfseg::Error::io(path, e))
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Parses a possibly partial document; keys it leaves out keep their
    /// values from [`ExperimentConfig::default`], section by section.
    pub fn from_toml(text: &str) -> Result<Self> {
        let invalid = |e: &dyn std::fmt::Display| otfseg::Error::Validation(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| invalid(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| invalid(&e))?;
        merge(&mut merged, user);
        Ok(toml::Value::Table(merged).try_into().map_err(|e| invalid(&e))?)
    }

    /// Applies flag overrides and propagates the seed.
    pub fn resolve(mut self, seed: Option<u64>, output_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = output_dir {
            self.output_dir = d;
        }
        self.synth.source.seed = self.seed;
        self.dpg_train.seed = self.seed;
        self.train.seed = self.seed;
        self.tent.seed = self.seed;
        self
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    pub fn shift(&self, name: &str) -> otfseg::Result<ShiftSpec> {
        match self.shifts.get(name) {
            Some(s) => Ok(s.clone()),
            None => ShiftSpec::preset(name),
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))[..16].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn flags_override_and_seed_propagates() {
        let c = ExperimentConfig::default().resolve(Some(7), Some("out".into()));
        assert_eq!((c.train.seed, c.dpg_train.seed, c.tent.seed, c.synth.source.seed), (7, 7, 7, 7));
        assert_eq!(c.path(Path::new("data/source")), PathBuf::from("out/data/source"));
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[train]\nepochs = 2\n[synth]\nn_train = 8\n").unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.lr_max, d.train.lr_max);
        assert_eq!(c.dpg_train, d.dpg_train);
        assert_eq!(c.synth.source.n_train, 8);
        assert_eq!(c.synth.target_shift, "strong");
    }

    #[test]
    fn unknown_values_are_validation_errors() {
        let e = ExperimentConfig::from_toml("[train]\nepochs = \"many\"\n").unwrap_err();
        assert_eq!(crate::exit_code(&e), 1);
    }
}
