//! Unified key=value configuration for all subcommands.
//!
//! One flat grammar covers the model keys (depth, operator, k_lsa, k_lsa_dw,
//! k_gsi, lambda, alpha, group_size, n_pairs, num_classes), the training
//! keys, and the dataset keys. `--set key=value` flags override file values.
//! Unknown keys are rejected.

use dcdc_core::data::DatasetConfig;
use dcdc_core::network::{apply_model_keys, parse_kv, ModelSpec, MODEL_KEYS};
use dcdc_core::tensor::Dtype;
use dcdc_core::train::TrainConfig;
use dcdc_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const TRAIN_KEYS: [&str; 10] = [
    "arch",
    "epochs",
    "batch_size",
    "base_lr",
    "momentum",
    "weight_decay",
    "warmup_epochs",
    "warmup_factor",
    "seed",
    "dtype",
];

pub const DATA_KEYS: [&str; 7] = [
    "train_samples",
    "val_samples",
    "classes",
    "image_size",
    "channels",
    "data_seed",
    "noise",
];

/// Model architecture selector for the train subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Six-block compact net (32×32-scale inputs).
    Small,
    /// Full residual net at the configured depth.
    Resnet,
}

#[derive(Debug, Clone)]
pub struct FullConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub arch: Arch,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            data: DatasetConfig::default(),
            arch: Arch::Small,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad {key} value {value:?}")))
}

impl FullConfig {
    /// Loads the optional config file, then applies `--set` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<FullConfig> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        for item in overrides {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got {item:?}"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<FullConfig> {
        for key in kv.keys() {
            let known = MODEL_KEYS.contains(&key.as_str())
                || TRAIN_KEYS.contains(&key.as_str())
                || DATA_KEYS.contains(&key.as_str());
            if !known {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }
        let mut cfg = FullConfig::default();
        apply_model_keys(&mut cfg.model, kv, false)?;
        for (key, value) in kv {
            match key.as_str() {
                "arch" => {
                    cfg.arch = match value.as_str() {
                        "small" => Arch::Small,
                        "resnet" => Arch::Resnet,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown arch {other:?}; choose small or resnet"
                            )))
                        }
                    }
                }
                "epochs" => cfg.train.epochs = parse_as(key, value)?,
                "batch_size" => cfg.train.batch_size = parse_as(key, value)?,
                "base_lr" => cfg.train.base_lr = parse_as(key, value)?,
                "momentum" => cfg.train.momentum = parse_as(key, value)?,
                "weight_decay" => cfg.train.weight_decay = parse_as(key, value)?,
                "warmup_epochs" => cfg.train.warmup_epochs = parse_as(key, value)?,
                "warmup_factor" => cfg.train.warmup_factor = parse_as(key, value)?,
                "seed" => cfg.train.seed = parse_as(key, value)?,
                "dtype" => {
                    cfg.train.dtype = match value.as_str() {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown dtype {other:?}; choose f32 or f64"
                            )))
                        }
                    }
                }
                "train_samples" => cfg.data.train_samples = parse_as(key, value)?,
                "val_samples" => cfg.data.val_samples = parse_as(key, value)?,
                "classes" => cfg.data.classes = parse_as(key, value)?,
                "image_size" => cfg.data.image_size = parse_as(key, value)?,
                "channels" => cfg.data.channels = parse_as(key, value)?,
                "data_seed" => cfg.data.seed = parse_as(key, value)?,
                "noise" => cfg.data.noise = parse_as(key, value)?,
                _ => {} // model keys already applied
            }
        }
        Ok(cfg)
    }

    /// Resolved config in the same grammar the parser accepts.
    pub fn render(&self) -> String {
        let mut out = self.model.to_config_string();
        out.push_str(&format!(
            "arch = {}\nepochs = {}\nbatch_size = {}\nbase_lr = {}\nmomentum = {}\nweight_decay = {}\nwarmup_epochs = {}\nwarmup_factor = {}\nseed = {}\ndtype = {}\n",
            match self.arch {
                Arch::Small => "small",
                Arch::Resnet => "resnet",
            },
            self.train.epochs,
            self.train.batch_size,
            self.train.base_lr,
            self.train.momentum,
            self.train.weight_decay,
            self.train.warmup_epochs,
            self.train.warmup_factor,
            self.train.seed,
            match self.train.dtype {
                Dtype::F32 => "f32",
                Dtype::F64 => "f64",
            },
        ));
        out.push_str(&format!(
            "train_samples = {}\nval_samples = {}\nclasses = {}\nimage_size = {}\nchannels = {}\ndata_seed = {}\nnoise = {}\n",
            self.data.train_samples,
            self.data.val_samples,
            self.data.classes,
            self.data.image_size,
            self.data.channels,
            self.data.seed,
            self.data.noise,
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file_defaults() {
        let cfg = FullConfig::load(None, &["depth=50".into(), "epochs=3".into()]).unwrap();
        assert_eq!(cfg.model.depth, 50);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(FullConfig::load(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn render_roundtrips() {
        let cfg = FullConfig::load(None, &["operator=lsa".into(), "dtype=f64".into()]).unwrap();
        let rendered = cfg.render();
        let kv = parse_kv(&rendered).unwrap();
        let back = FullConfig::from_kv(&kv).unwrap();
        assert_eq!(back.model.operator, "lsa");
        assert_eq!(back.train.dtype, Dtype::F64);
    }
}
