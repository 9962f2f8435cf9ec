//! TOML run configuration with `[model]`, `[lora]`, `[train]` and `[data]`
//! sections. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_TILE;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::train::TrainConfig;
use crate::vit::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tile_size: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lora.rank > 0 {
            self.lora.validate(&self.model)?;
        }
        self.train.validate()?;
        if self.data.tile_size == 0 {
            return Err(Error::Config("data.tile_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::format(source, e.to_string().trim_end()))?;
        let base = source.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.val_manifest,
            &mut cfg.data.test_manifest,
            &mut cfg.data.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(|e| Error::format(source, e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}
