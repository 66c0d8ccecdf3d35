//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::net::NetConfig;
use crate::synth::DatasetConfig;
use crate::train::TrainConfig;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective-config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tolerances: Vec<f64>,
    pub threshold: f64,
    pub tile_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tolerances: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], threshold: 0.5, tile_size: 60 }
    }
}

/// Every section is optional in the file; missing keys take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &[u8]) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_slice(text).map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        Self::from_json(&read_file(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        crate::net::shape_plan(self.eval.tile_size, &self.net)?;
        if self.eval.tolerances.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::config("eval tolerances must be >= 0"));
        }
        Ok(())
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_effective(&self, dir: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&dir.as_ref().join(EFFECTIVE_CONFIG_FILE), &json)
    }
}
