//! On-disk model checkpoints.
//!
//! A checkpoint directory holds `manifest.json` (architecture, fingerprints,
//! training metadata and the list of every weight name with its shape) and
//! `weights.safetensors` with the named weights as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dpg::DpgConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::model::ArchConfig;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
const FORMAT: &str = "otfseg-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Segmentation UNet (adaptive or plain).
    Unet(ArchConfig),
    /// Domain prior generator autoencoder.
    Dpg(DpgConfig),
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Mean soft Dice loss, recorded for segmentation training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss_curve: Vec<EpochLog>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: Architecture,
    pub weights: BTreeMap<String, Tensor<f32>>,
    /// Fingerprint of the domain prior generator the model was trained with.
    pub dpg_fingerprint: Option<String>,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    fingerprint: String,
    arch: Architecture,
    dpg_fingerprint: Option<String>,
    metadata: TrainingMetadata,
    weights_file: String,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 over names, shapes and little-endian values, hex encoded.
pub fn weights_digest(weights: &BTreeMap<String, Tensor<f32>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in weights {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl ModelCheckpoint {
    /// Short content identifier of the weights.
    pub fn fingerprint(&self) -> String {
        weights_digest(&self.weights)[..16].to_string()
    }

    /// Full digest, for byte-equality checks.
    pub fn weights_hash(&self) -> String {
        weights_digest(&self.weights)
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_f32_tensors(&dir.join(WEIGHTS_FILE), self.weights.iter().map(|(k, v)| (k.as_str(), v)))?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            fingerprint: self.fingerprint(),
            arch: self.arch.clone(),
            dpg_fingerprint: self.dpg_fingerprint.clone(),
            metadata: self.metadata.clone(),
            weights_file: WEIGHTS_FILE.into(),
            tensors: self
                .weights
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::corrupt(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::corrupt(
                &path,
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        let weights_path = dir.join(&manifest.weights_file);
        let weights = io::read_f32_tensors(&weights_path)?;
        if weights.len() != manifest.tensors.len() {
            return Err(Error::corrupt(
                &weights_path,
                format!("manifest lists {} tensors, file has {}", manifest.tensors.len(), weights.len()),
            ));
        }
        for entry in &manifest.tensors {
            match weights.get(&entry.name) {
                Some(t) if t.shape() == entry.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::corrupt(
                        &weights_path,
                        format!("{} has shape {:?}, manifest says {:?}", entry.name, t.shape(), entry.shape),
                    ))
                }
                None => return Err(Error::corrupt(&weights_path, format!("missing tensor {}", entry.name))),
            }
        }
        let ckpt = Self {
            arch: manifest.arch,
            weights,
            dpg_fingerprint: manifest.dpg_fingerprint,
            metadata: manifest.metadata,
        };
        if ckpt.fingerprint() != manifest.fingerprint {
            return Err(Error::corrupt(&weights_path, "weights do not match the manifest fingerprint"));
        }
        Ok(ckpt)
    }
}
