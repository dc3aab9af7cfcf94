//! Experiment configuration: JSON with unknown-key rejection and full
//! validation before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{PgdConfig, RoaConfig};
use crate::net::{default_substitute_blocks, default_target_blocks, ConvBlockSpec};
use crate::train::SgdConfig;

/// Environment variable consulted for the CIFAR-10 directory when the
/// config does not name one.
pub const DATA_ROOT_ENV: &str = "ABNN_DATA_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("referenced file missing: {0}")]
    MissingFile(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "image-toy")]
    ImageToy,
    #[serde(rename = "cifar-subset")]
    CifarSubset,
}

/// Knobs for the blob tasks; `None` keeps the preset value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticOverrides {
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub noise_std: Option<f64>,
    /// Blob deviation as a fraction of the image side.
    #[serde(default)]
    pub blob_sigma_frac: Option<f64>,
}

impl SyntheticOverrides {
    pub fn apply(&self, spec: &mut crate::data::SyntheticSpec) {
        if let Some(a) = self.amplitude {
            spec.amplitude = a;
        }
        if let Some(n) = self.noise_std {
            spec.noise_std = n;
        }
        if let Some(f) = self.blob_sigma_frac {
            spec.blob_sigma = f * spec.height.min(spec.width) as f64;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,

    /// Square image side for the synthetic task.
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,

    /// CIFAR-10 directory; falls back to `ABNN_DATA_ROOT`.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    /// Original CIFAR classes the substitute pre-trains on.
    #[serde(default = "default_substitute_classes")]
    pub substitute_classes: Vec<usize>,
    /// Original CIFAR classes of the target task (disjoint from the above).
    #[serde(default = "default_target_classes")]
    pub target_classes: Vec<usize>,
    /// Desk-scale caps on loaded CIFAR samples.
    #[serde(default = "default_cifar_train_limit")]
    pub cifar_train_limit: usize,
    #[serde(default = "default_cifar_test_limit")]
    pub cifar_test_limit: usize,

    /// Optional overrides of the synthetic task's geometry.
    #[serde(default)]
    pub synthetic: Option<SyntheticOverrides>,

    #[serde(default = "default_target_blocks")]
    pub target_blocks: Vec<ConvBlockSpec>,
    #[serde(default = "default_substitute_blocks")]
    pub substitute_blocks: Vec<ConvBlockSpec>,

    pub pretrain: SgdConfig,
    pub train: SgdConfig,
    pub pgd: PgdConfig,
    pub roa: RoaConfig,

    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Test samples evaluated under PGD (the full test set is used for
    /// clean accuracy).
    #[serde(default = "default_pgd_eval_samples")]
    pub pgd_eval_samples: usize,
    /// Test samples evaluated under the occlusion attack (grid search is
    /// the expensive part).
    #[serde(default = "default_roa_eval_samples")]
    pub roa_eval_samples: usize,

    pub out_dir: PathBuf,
}

fn default_image_side() -> usize {
    16
}
fn default_train_samples() -> usize {
    512
}
fn default_test_samples() -> usize {
    512
}
fn default_substitute_classes() -> Vec<usize> {
    vec![0, 1, 2, 3, 4]
}
fn default_target_classes() -> Vec<usize> {
    vec![5, 6, 7, 8, 9]
}
fn default_cifar_train_limit() -> usize {
    2000
}
fn default_cifar_test_limit() -> usize {
    1000
}
fn default_eval_batch() -> usize {
    32
}
fn default_pgd_eval_samples() -> usize {
    512
}
fn default_roa_eval_samples() -> usize {
    128
}

impl ExperimentConfig {
    /// A complete toy-task config with the standard attack settings.
    pub fn toy_default(out_dir: PathBuf) -> Self {
        ExperimentConfig {
            task: Task::ImageToy,
            image_side: default_image_side(),
            train_samples: default_train_samples(),
            test_samples: default_test_samples(),
            data_root: None,
            synthetic: None,
            substitute_classes: default_substitute_classes(),
            target_classes: default_target_classes(),
            cifar_train_limit: default_cifar_train_limit(),
            cifar_test_limit: default_cifar_test_limit(),
            target_blocks: default_target_blocks(),
            substitute_blocks: default_substitute_blocks(),
            pretrain: SgdConfig { learning_rate: 0.05, momentum: 0.9, epochs: 8, batch_size: 32 },
            train: SgdConfig { learning_rate: 0.05, momentum: 0.9, epochs: 10, batch_size: 32 },
            pgd: PgdConfig::standard(),
            roa: RoaConfig::standard(),
            seeds: vec![1, 2, 3],
            eval_batch_size: default_eval_batch(),
            pgd_eval_samples: default_pgd_eval_samples(),
            roa_eval_samples: default_roa_eval_samples(),
            out_dir,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            ConfigError::Parse {
                path: path.to_path_buf(),
                detail: format!("field `{}`: {}", e.path(), e.inner()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Directory holding the CIFAR binaries, from config or environment.
    pub fn resolved_data_root(&self) -> Option<PathBuf> {
        self.data_root
            .clone()
            .or_else(|| std::env::var(DATA_ROOT_ENV).ok().map(PathBuf::from))
    }

    /// Total validation: every malformed config is rejected here, before
    /// any compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.target_blocks.is_empty() || self.substitute_blocks.is_empty() {
            return bad("block specs must be nonempty".into());
        }
        for spec in self.target_blocks.iter().chain(&self.substitute_blocks) {
            spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.substitute_blocks.len() < self.target_blocks.len() {
            return bad(format!(
                "substitute has {} blocks, target needs {}",
                self.substitute_blocks.len(),
                self.target_blocks.len()
            ));
        }
        self.pretrain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pgd.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.roa.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval_batch_size == 0 || self.pgd_eval_samples == 0 || self.roa_eval_samples == 0 {
            return bad("evaluation sizes must be positive".into());
        }
        match self.task {
            Task::ImageToy => {
                if self.image_side < 4 {
                    return bad(format!("image_side {} too small", self.image_side));
                }
                if self.train_samples < 2 * self.train.batch_size {
                    return bad("train_samples must cover at least two batches".into());
                }
            }
            Task::CifarSubset => {
                let root = self.resolved_data_root().ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "cifar-subset task needs data_root or ${DATA_ROOT_ENV}"
                    ))
                })?;
                for file in (1..=5)
                    .map(|i| format!("data_batch_{i}.bin"))
                    .chain(std::iter::once("test_batch.bin".into()))
                {
                    let p = root.join(file);
                    if !p.exists() {
                        return Err(ConfigError::MissingFile(p));
                    }
                }
                let mut a = self.substitute_classes.clone();
                let mut b = self.target_classes.clone();
                a.sort_unstable();
                b.sort_unstable();
                if a.iter().any(|c| b.binary_search(c).is_ok()) {
                    return bad("substitute and target class sets must be disjoint".into());
                }
                if a.iter().chain(&b).any(|&c| c >= 10) {
                    return bad("CIFAR-10 classes must lie in 0..10".into());
                }
            }
        }
        Ok(())
    }
}
