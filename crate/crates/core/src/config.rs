//! Run configuration documents (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_image_folder, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Toggles};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 7, per_class: 50, seed: 1 }
    }
}

/// Where samples come from: a class-folder tree if `path` is set, otherwise
/// the synthetic generator at the model's image size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub data: DataSpec,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.toggles.validate()?;
        self.model.validate(&self.toggles)
    }

    /// The class-folder tree at `path` (or `data.path`), else the synthetic
    /// set at the model's image size. Also returns the undecodable files.
    pub fn dataset(&self, path: Option<&Path>) -> Result<(Dataset, Vec<(PathBuf, String)>)> {
        match path.or(self.data.path.as_deref()) {
            Some(root) => {
                let load = load_image_folder(root, self.model.image_size)?;
                Ok((load.dataset, load.skipped))
            }
            None => {
                let s = &self.data.synthetic;
                Ok((generate_synthetic(s.classes, s.per_class, self.model.image_size, s.seed)?, vec![]))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

/// Parses a document. Missing keys take defaults; unknown keys are an error
/// when `strict`, otherwise they are logged and returned.
pub fn parse_run_config(text: &str, strict: bool) -> Result<(RunConfig, Vec<String>)> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    if !unknown.is_empty() {
        if strict {
            return Err(Error::Config(format!("unknown key(s): {}", unknown.join(", "))));
        }
        for key in &unknown {
            log::warn!("ignoring unknown config key {key}");
        }
    }
    cfg.validate()?;
    Ok((cfg, unknown))
}

pub fn load_run_config(path: &Path, strict: bool) -> Result<(RunConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text, strict)
}
