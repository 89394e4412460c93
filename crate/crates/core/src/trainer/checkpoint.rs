use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::designer::DesignerParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "gdesigner-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: TrainConfig,
    pub params: DesignerParams,
    pub rng_seed: u64,
    pub trained_queries: usize,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: DesignerParams, trained_queries: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            rng_seed: config.seed,
            config,
            params,
            trained_queries,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION.to_string(),
                found: found.to_string(),
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.params.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}
