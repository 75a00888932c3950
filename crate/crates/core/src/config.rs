//! Structured configuration file: sections `[data]`, `[model]`, `[loss]`,
//! and `[train]`, all fields optional over the compact-backend defaults.
//! Command-line flags override file values, which override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splits::SplitConfig;
use crate::train::{BackendChoice, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_archs: Option<Vec<String>>,
    pub train_libs: Option<Vec<String>>,
    pub ood_archs: Option<Vec<String>>,
    pub ood_libs: Option<Vec<String>>,
    pub train_pairs: Option<usize>,
    pub eval_pairs: Option<usize>,
    pub mixed_arch_train_pairs: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "compact" or "pretrained-text".
    pub backend: Option<String>,
    pub d: Option<usize>,
    pub d_z: Option<usize>,
    pub ls_max: Option<usize>,
    pub k: Option<usize>,
    pub vocab_size: Option<usize>,
    pub weights_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps_guard: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub freeze_embedder: Option<bool>,
    pub enable_removal: Option<bool>,
    pub enable_cvib: Option<bool>,
}

/// Parsed configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolve the training configuration: defaults, then file values.
    /// The default seed applies only when the file has none.
    pub fn train_config(&self, default_seed: u64) -> Result<TrainConfig> {
        let backend = match self.model.backend.as_deref() {
            None | Some("compact") => BackendChoice::Compact,
            Some("pretrained-text") => BackendChoice::PretrainedText,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown backend `{other}` (expected compact or pretrained-text)"
                )))
            }
        };
        let seed = self.train.seed.unwrap_or(default_seed);
        let mut cfg = match backend {
            BackendChoice::Compact => TrainConfig::compact_defaults(seed),
            BackendChoice::PretrainedText => {
                let dir = self.model.weights_dir.clone().ok_or_else(|| {
                    Error::Config("pretrained-text backend requires model.weights_dir".into())
                })?;
                TrainConfig::pretrained_defaults(seed, dir)
            }
        };
        if let Some(v) = self.model.d {
            cfg.d = v;
        }
        if let Some(v) = self.model.d_z {
            cfg.d_z = v;
        }
        if let Some(v) = self.model.ls_max {
            cfg.ls_max = v;
        }
        if let Some(v) = self.model.k {
            cfg.k = v;
        }
        if let Some(v) = self.model.vocab_size {
            cfg.vocab_size = v;
        }
        if let Some(v) = self.loss.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.loss.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.loss.eps_guard {
            cfg.eps_guard = v;
        }
        if let Some(v) = self.loss.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.train.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.train.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.train.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.train.freeze_embedder {
            cfg.freeze_embedder = v;
        }
        if let Some(v) = self.train.enable_removal {
            cfg.enable_removal = v;
        }
        if let Some(v) = self.train.enable_cvib {
            cfg.enable_cvib = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve the split-builder configuration; the `[data]` tag sets are
    /// mandatory for building splits.
    pub fn split_config(&self, default_seed: u64) -> Result<SplitConfig> {
        let need = |name: &str, v: &Option<Vec<String>>| -> Result<Vec<String>> {
            v.clone()
                .ok_or_else(|| Error::Config(format!("config is missing data.{name}")))
        };
        Ok(SplitConfig {
            train_archs: need("train_archs", &self.data.train_archs)?,
            train_libs: need("train_libs", &self.data.train_libs)?,
            ood_archs: need("ood_archs", &self.data.ood_archs)?,
            ood_libs: need("ood_libs", &self.data.ood_libs)?,
            train_pairs: self.data.train_pairs.unwrap_or(512),
            eval_pairs: self.data.eval_pairs.unwrap_or(256),
            seed: self.train.seed.unwrap_or(default_seed),
            mixed_arch_train_pairs: self.data.mixed_arch_train_pairs.unwrap_or(true),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_yields_compact_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        let train = cfg.train_config(42).unwrap();
        assert_eq!(train, TrainConfig::compact_defaults(42));
        assert_eq!(train.beta1, 0.05);
        assert_eq!(train.beta2, 1e-3);
        assert_eq!(train.tau, 0.5);
    }

    #[test]
    fn file_values_override_defaults() {
        let text = r#"
            [data]
            train_archs = ["synthA", "synthB"]
            train_libs = ["synthlib0"]
            ood_archs = ["synthC"]
            ood_libs = ["synthlib1"]
            train_pairs = 64

            [model]
            d = 32
            d_z = 16

            [loss]
            beta1 = 0.1
            tau = 0.6

            [train]
            epochs = 3
            seed = 9
            enable_cvib = false
        "#;
        let cfg: FileConfig = toml::from_str(text).unwrap();
        let train = cfg.train_config(42).unwrap();
        assert_eq!(train.d, 32);
        assert_eq!(train.d_z, 16);
        assert_eq!(train.beta1, 0.1);
        assert_eq!(train.tau, 0.6);
        assert_eq!(train.epochs, 3);
        assert_eq!(train.seed, 9);
        assert!(!train.enable_cvib);
        assert!(train.enable_removal);

        let split = cfg.split_config(42).unwrap();
        assert_eq!(split.train_pairs, 64);
        assert_eq!(split.eval_pairs, 256);
        assert_eq!(split.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[train]\nlerning_rate = 0.1\n";
        assert!(toml::from_str::<FileConfig>(text).is_err());
    }

    #[test]
    fn unknown_backend_is_rejected() {
        let text = "[model]\nbackend = \"transformer\"\n";
        let cfg: FileConfig = toml::from_str(text).unwrap();
        assert!(cfg.train_config(0).is_err());
    }

    #[test]
    fn split_config_requires_tag_sets() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert!(cfg.split_config(0).is_err());
    }
}
