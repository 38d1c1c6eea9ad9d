//! Run configuration: presets, flat TOML files and the run manifest.
//!
//! Resolution order is defaults, then presets in the order given, then the
//! config file, then individual command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::TrainConfig;
use crate::prune::MaskMode;

pub const PRESETS: [&str; 7] = [
    "fb15k237-paper",
    "wn18rr-paper",
    "toy-smoke",
    "desk-synthetic",
    "wo-prune",
    "wo-meta",
    "wo-prune-meta",
];

/// Applies a named preset on top of `cfg`. Dataset presets set every
/// hyperparameter; ablation presets only flip their switches so they can
/// be stacked after a dataset preset.
pub fn apply_preset(cfg: &mut TrainConfig, name: &str) -> Result<()> {
    match name {
        "fb15k237-paper" | "wn18rr-paper" => {
            *cfg = TrainConfig {
                seed: cfg.seed,
                ..TrainConfig::default()
            };
        }
        "toy-smoke" => {
            *cfg = TrainConfig {
                dim: 8,
                epochs: 3,
                batch_size: 128,
                quiz_size: 32,
                init_scale: 0.1,
                gamma: 0.5,
                seed: cfg.seed,
                ..TrainConfig::default()
            };
        }
        "desk-synthetic" => {
            *cfg = TrainConfig {
                dim: 64,
                epochs: 100,
                batch_size: 1000,
                quiz_size: 250,
                n3_weight: 0.03,
                eval_every: 10,
                seed: cfg.seed,
                ..TrainConfig::default()
            };
        }
        "wo-prune" => cfg.mask_mode = MaskMode::RandomFrozen,
        "wo-meta" => cfg.meta_enabled = false,
        "wo-prune-meta" => {
            cfg.mask_mode = MaskMode::RandomFrozen;
            cfg.meta_enabled = false;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Overlays the keys of a flat TOML document on `cfg`. Unknown keys are
/// rejected by name.
pub fn overlay_toml(cfg: &TrainConfig, text: &str) -> Result<TrainConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
    let mut value = serde_json::to_value(cfg)?;
    let obj = value.as_object_mut().expect("config serializes to an object");
    for (k, v) in table {
        if v.is_table() || v.is_array() {
            return Err(Error::Config(format!("config key '{k}' must be a scalar")));
        }
        obj.insert(k, serde_json::to_value(v)?);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("config file: {e}")))
}

pub fn load_config_file(cfg: &TrainConfig, path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    overlay_toml(cfg, &text)
}

/// Flat TOML rendering of a config; `None` options are left out.
pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Serde(e.to_string()))
}

/// SHA-256 of the canonical JSON form of a config.
pub fn config_digest(cfg: &TrainConfig) -> Result<[u8; 32]> {
    Ok(Sha256::digest(serde_json::to_vec(cfg)?).into())
}

/// Written to the output directory before training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub presets: Vec<String>,
    pub config_file: Option<String>,
    pub dataset_dir: String,
    pub dataset_digest: String,
    pub code_version: String,
    pub started_unix: u64,
    pub out_dir: String,
    pub threads: usize,
    pub resumed_from: Option<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
