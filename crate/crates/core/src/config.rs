//! Experiment settings as one TOML document: a few flat keys followed by
//! `[data]`, `[model.encoder]`, `[model.decoder]` and `[train]` sections.
//! Every key is optional and unknown keys are rejected. A file is merged
//! key by key over the desk defaults, so a partial `[model.decoder]` keeps
//! the micro widths rather than falling back to full scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data, init and batch order.
    pub seed: u64,
    /// Number of samples `gen-data` writes.
    pub samples: usize,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk scale: micro model on the default synthetic fisheye data.
    fn default() -> Self {
        let data = SynthConfig::default();
        RunConfig {
            seed: 0,
            samples: 500,
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            model: ModelConfig::micro(data.num_classes()),
            data,
            train: TrainConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the top-level seed into the training settings.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.decoder.num_classes != self.data.num_classes() {
            return Err(Error::Config(format!(
                "model predicts {} classes but data has {}",
                self.model.decoder.num_classes,
                self.data.num_classes()
            )));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
