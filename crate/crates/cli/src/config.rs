//! Run configuration: one JSON file (all fields optional, unknown keys
//! rejected) plus command-line overrides, materialized into a fully
//! explicit effective configuration that every run echoes and stores.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use r2r_core::model::{ModelConfig, Pooling, StageConfig};
use r2r_core::train::{AdamWParams, TrainConfig};
use r2r_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: drives model initialization and shuffling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub training: TrainingSpec,
    pub data: DataSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            model: ModelSpec::default(),
            training: TrainingSpec::default(),
            data: DataSpec::default(),
        }
    }
}

/// [`ModelConfig`] minus the seed (which the run seed provides).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub stages: Vec<StageConfig>,
    pub n_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub pooling: Pooling,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let desk = ModelConfig::desk_default();
        ModelSpec {
            stages: desk.stages,
            n_classes: desk.n_classes,
            input_channels: desk.input_channels,
            input_size: desk.input_size,
            pooling: desk.pooling,
        }
    }
}

impl ModelSpec {
    pub fn to_model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            stages: self.stages.clone(),
            n_classes: self.n_classes,
            input_channels: self.input_channels,
            input_size: self.input_size,
            pooling: self.pooling,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let hyper = AdamWParams::default();
        TrainingSpec {
            epochs: 20,
            batch_size: 8,
            val_fraction: 0.1,
            lr: hyper.lr0,
            lr_min: 0.0,
            weight_decay: hyper.weight_decay,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
        }
    }
}

impl TrainingSpec {
    pub fn to_train_config(&self, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
            shuffle_seed,
            hyper: AdamWParams {
                lr0: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            lr_min: self.lr_min,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// CSV manifest path; mutually exclusive with `synthetic`.
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 256,
            size: 64,
            seed: 0,
        }
    }
}

/// Loads a config file, or the defaults when no path is given. Unknown keys
/// anywhere in the file are rejected with the offending key path.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Ingestion(format!("cannot read config {}: {e}", path.display()))
            })?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| {
                Error::Parse(format!(
                    "config {}: {} (at key path `{}`)",
                    path.display(),
                    e.inner(),
                    e.path()
                ))
            })
        }
    }
}

/// Resolved dataset with its class names.
pub struct LoadedData {
    pub samples: Vec<r2r_core::data::Sample>,
    pub class_names: Vec<String>,
}

pub fn load_data(spec: &DataSpec) -> Result<LoadedData> {
    match (&spec.manifest, &spec.synthetic) {
        (Some(_), Some(_)) => Err(Error::Config(
            "data: set either `manifest` or `synthetic`, not both".into(),
        )),
        (None, None) => Err(Error::Config(
            "data: no dataset configured; set `manifest` or `synthetic` (or pass --synthetic N)"
                .into(),
        )),
        (Some(path), None) => {
            let manifest = r2r_core::data::load_manifest(path)?;
            let samples = manifest.load_samples()?;
            Ok(LoadedData {
                samples,
                class_names: manifest.class_names,
            })
        }
        (None, Some(synth)) => Ok(LoadedData {
            samples: r2r_core::data::generate_synthetic(synth.n, synth.size, synth.seed)?,
            class_names: r2r_core::data::synthetic_class_names(),
        }),
    }
}
