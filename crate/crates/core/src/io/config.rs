use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_bytes;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Which phantoms a run trains and evaluates on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub train_count: usize,
    pub train_seed: u64,
    pub eval_count: usize,
    pub eval_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            train_count: 200,
            train_seed: 1,
            eval_count: 20,
            eval_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
        }
    }
}

/// Everything a CLI run needs, as a TOML document. All fields default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::MaskKind;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.data_consistency = true;
        cfg.train.hr_grad_stop_epochs = Some(1);
        cfg.train.mask.kind = MaskKind::Gaussian2d;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[train.mask]\nacceleration = 4.0\nshape = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd = 30\n").is_err());
        let partial = RunConfig::from_toml("[train]\nepochs = 9\n[train.mask]\nacceleration = 4.0\n").unwrap();
        assert_eq!(partial.train.epochs, 9);
        assert_eq!(partial.train.mask.acceleration, 4.0);
    }
}
