//! Experiment configuration: a flat TOML table whose keys mirror
//! [`ExperimentConfig`]. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ibpvae::data::DspritesStride;
use ibpvae::decomposition::DecompositionOptions;
use ibpvae::models::{ModelConfig, ModelKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable naming the dataset cache directory when the config
/// leaves `cache_dir` unset.
pub const CACHE_DIR_ENV: &str = "IBPVAE_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "dsprites")]
    Dsprites,
    #[serde(rename = "colored-mnist")]
    ColoredMnist,
    #[serde(rename = "mig-oracle")]
    MigOracle,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Dsprites => "dsprites",
            DatasetName::ColoredMnist => "colored-mnist",
            DatasetName::MigOracle => "mig-oracle",
        }
    }

    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "dsprites" => Ok(DatasetName::Dsprites),
            "colored-mnist" => Ok(DatasetName::ColoredMnist),
            "mig-oracle" => Ok(DatasetName::MigOracle),
            other => Err(CliError::Config(format!(
                "unknown dataset `{other}` (expected dsprites, colored-mnist or mig-oracle)"
            ))),
        }
    }
}

/// Every experiment setting. Model hyperparameters left unset take the
/// dataset preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub dataset: DatasetName,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior_temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,

    /// Seed for dataset construction (colors, splits, oracle draws).
    #[serde(default)]
    pub data_seed: u64,
    /// dSprites `.npz` archive; the procedural renderer is used when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsprites_path: Option<PathBuf>,
    #[serde(default = "default_stride")]
    pub dsprites_stride: [usize; 5],
    /// MNIST IDX files; the bundled digits are used when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_labels: Option<PathBuf>,
    /// Cache for derived datasets. Falls back to `IBPVAE_CACHE_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Train on a seeded random subset of this many training rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default = "default_oracle_n")]
    pub oracle_n: usize,
    #[serde(default = "default_oracle_cardinalities")]
    pub oracle_cardinalities: Vec<usize>,
    /// Factor index per code dimension; `-1` marks a pure-noise dimension.
    #[serde(default = "default_oracle_mapping")]
    pub oracle_mapping: Vec<i64>,
    #[serde(default = "default_oracle_noise")]
    pub oracle_noise: f64,

    #[serde(default = "default_mig_bins")]
    pub mig_bins: usize,
    #[serde(default = "default_mig_samples")]
    pub mig_samples: usize,
    #[serde(default = "default_tcd_estimator_batch")]
    pub tcd_estimator_batch: usize,
    #[serde(default = "default_one")]
    pub tcd_samples_per_point: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcd_eval_points: Option<usize>,

    #[serde(default)]
    pub sample_index: usize,
    /// Traversed dimensions; all latent dimensions when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traverse_dims: Option<Vec<usize>>,
    #[serde(default = "default_traverse_range")]
    pub traverse_range: [f64; 2],
    #[serde(default = "default_traverse_steps")]
    pub traverse_steps: usize,
    #[serde(default)]
    pub trigger_dim: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_stride() -> [usize; 5] {
    [1, 2, 4, 2, 2]
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_oracle_n() -> usize {
    10_000
}
fn default_oracle_cardinalities() -> Vec<usize> {
    vec![3, 6, 10]
}
fn default_oracle_mapping() -> Vec<i64> {
    vec![0, 1, 2, -1]
}
fn default_oracle_noise() -> f64 {
    0.05
}
fn default_mig_bins() -> usize {
    ibpvae::mig::DEFAULT_BINS
}
fn default_mig_samples() -> usize {
    10_000
}
fn default_tcd_estimator_batch() -> usize {
    1024
}
fn default_one() -> usize {
    1
}
fn default_traverse_range() -> [f64; 2] {
    [-3.0, 3.0]
}
fn default_traverse_steps() -> usize {
    10
}

impl ExperimentConfig {
    /// A config with every optional key at its default.
    pub fn new(model: ModelKind, dataset: DatasetName) -> Self {
        let text = format!(
            "model = \"{}\"\ndataset = \"{}\"\n",
            model.as_str(),
            dataset.as_str()
        );
        Self::from_toml(&text).expect("minimal config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON encoding, excluding `output_dir` so
    /// that reruns into different directories share a hash.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        let json = serde_json::to_vec(&value).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn stride(&self) -> DspritesStride {
        DspritesStride(self.dsprites_stride)
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
    }

    pub fn oracle_mapping(&self) -> Result<Vec<Option<usize>>, CliError> {
        self.oracle_mapping
            .iter()
            .map(|&m| match m {
                -1 => Ok(None),
                m if m >= 0 => Ok(Some(m as usize)),
                m => Err(CliError::Config(format!(
                    "oracle_mapping entry {m} must be a factor index or -1"
                ))),
            })
            .collect()
    }

    pub fn decomposition_options(&self) -> DecompositionOptions {
        DecompositionOptions {
            estimator_batch: self.tcd_estimator_batch,
            samples_per_point: self.tcd_samples_per_point,
            eval_points: self.tcd_eval_points,
        }
    }

    /// The dataset preset with every configured override applied.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let kind = self.model;
        let mut m = match self.dataset {
            DatasetName::Dsprites => ModelConfig::dsprites(kind),
            DatasetName::ColoredMnist => ModelConfig::colored_mnist(kind),
            DatasetName::MigOracle => {
                let k = self.oracle_mapping.len();
                ModelConfig::mlp(kind, k, k, vec![32])
            }
        };
        // Without a preset task head, c_ibp predicts the first factor.
        if kind == ModelKind::CIbp && m.num_classes == 0 {
            m.num_classes = match self.dataset {
                DatasetName::Dsprites => ibpvae::data::DSPRITES_CARDINALITIES[0],
                _ => *self.oracle_cardinalities.first().unwrap_or(&0),
            };
            m.zeta = 1.0;
        }
        m.seed = self.seed;
        if let Some(v) = self.latent_dim {
            m.latent_dim = v;
        }
        if let Some(v) = &self.hidden {
            m.hidden = v.clone();
        }
        if let Some(v) = self.alpha {
            m.alpha = v;
        }
        if let Some(v) = self.beta {
            m.beta = v;
        }
        if let Some(v) = self.prior_temperature {
            m.prior_temperature = v;
        }
        if let Some(v) = self.posterior_temperature {
            m.posterior_temperature = v;
        }
        if let Some(v) = self.zeta {
            m.zeta = v;
        }
        if let Some(v) = self.warmup_epochs {
            m.warmup_epochs = v;
        }
        if let Some(v) = self.learning_rate {
            m.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            m.epochs = v;
        }
        if let Some(v) = self.batch_size {
            m.batch_size = v;
        }
        m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(m)
    }

    /// Check the settings that do not depend on loaded data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.model_config()?;
        self.stride()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!(
                "test_fraction must be in [0, 1), got {}",
                self.test_fraction
            ));
        }
        if self.mnist_images.is_some() != self.mnist_labels.is_some() {
            return bad("mnist_images and mnist_labels must be set together".into());
        }
        self.oracle_mapping()?;
        if self.mig_bins < 2 || self.mig_samples == 0 {
            return bad("mig_bins must be >= 2 and mig_samples >= 1".into());
        }
        if self.tcd_estimator_batch == 0 || self.tcd_samples_per_point == 0 {
            return bad("tcd_estimator_batch and tcd_samples_per_point must be >= 1".into());
        }
        if self.traverse_steps < 2 || !(self.traverse_range[0] < self.traverse_range[1]) {
            return bad("traversal needs >= 2 steps and an increasing range".into());
        }
        Ok(())
    }
}
