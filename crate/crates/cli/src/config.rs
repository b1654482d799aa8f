//! Experiment configuration: one JSON document per experiment, fully
//! resolved from a master seed so a fixed (config, seed) pair pins every
//! random choice in the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smoothinv::classifier::{MlpConfig, TrainConfig};
use smoothinv::data::{BlobSpec, JitterTransform};
use smoothinv::inversion::AttackConfig;
use smoothinv::smoothing::SmoothingSchedule;
use smoothinv::{Error, Result};

/// Where the dataset comes from: generated from a spec or loaded from CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Spec { spec: BlobSpec },
    Path { path: PathBuf },
}

/// Which generative prior the attack uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PriorSpec {
    Identity,
    Pca { latent_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Top-k accuracy cutoff; defaults to min(5, C-1).
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
}

fn default_ece_bins() -> usize {
    10
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            k: None,
            ece_bins: default_ece_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub model: MlpConfig,
    pub train: TrainConfig,
    pub prior: PriorSpec,
    pub attack: AttackConfig,
    #[serde(default)]
    pub metrics: MetricsOptions,
    /// Master seed; every component seed below is derived from it.
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// splitmix64 step used to derive independent component seeds from the
/// master seed.
pub fn derive_seed(master: u64, component: u64) -> u64 {
    let mut z = master
        .wrapping_add(component.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Component labels for seed derivation.
pub mod seed_component {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const EVAL_MODEL: u64 = 6;
    pub const SURROGATE: u64 = 7;
    pub const ROBUSTNESS: u64 = 8;
}

impl ExperimentConfig {
    /// The bundled toy experiment: three Gaussian blobs on a triangle, the
    /// small batch-norm MLP with its standard training protocol at the given
    /// smoothing factor, and the matching attack settings. The headline
    /// comparison runs this at alpha 0, 0.05, and -0.05.
    pub fn toy_preset(alpha: f64, master_seed: u64) -> Self {
        let mut config = ExperimentConfig {
            data: DataSource::Spec {
                spec: BlobSpec::toy_triangle(1.0, 100, 0),
            },
            test_fraction: 0.2,
            model: MlpConfig::toy(2, 3),
            train: TrainConfig::toy(SmoothingSchedule::with_default_warmup(alpha, 5000), 0),
            prior: PriorSpec::Identity,
            attack: AttackConfig::toy(0),
            metrics: MetricsOptions::default(),
            seed: master_seed,
        };
        config.resolve_seeds();
        config
    }

    /// Rewrites every component seed as a derivation of the master seed.
    pub fn resolve_seeds(&mut self) {
        if let DataSource::Spec { spec } = &mut self.data {
            spec.seed = derive_seed(self.seed, seed_component::DATA);
        }
        self.train.seed = derive_seed(self.seed, seed_component::TRAIN);
        self.attack.seed = derive_seed(self.seed, seed_component::ATTACK);
        self.attack.transform = JitterTransform {
            std_dev: self.attack.transform.std_dev,
            seed: derive_seed(self.seed, seed_component::ATTACK),
        };
    }

    /// Replaces the master seed and re-derives all component seeds.
    pub fn with_seed(mut self, master_seed: u64) -> Self {
        self.seed = master_seed;
        self.resolve_seeds();
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)?;
        config.resolve_seeds();
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test_fraction must be in [0, 1)"));
        }
        self.attack.validate()?;
        if let PriorSpec::Pca { latent_dim } = self.prior {
            if latent_dim == 0 {
                return Err(Error::invalid("pca latent_dim must be >= 1"));
            }
        }
        if self.metrics.ece_bins == 0 {
            return Err(Error::invalid("ece_bins must be >= 1"));
        }
        if let Some(k) = self.metrics.k {
            if k == 0 || k >= self.model.num_classes {
                return Err(Error::invalid("metrics.k must satisfy 1 <= k < C"));
            }
        }
        Ok(())
    }

    /// Top-k cutoff, defaulting to min(5, C-1) when unset.
    pub fn acc_k(&self) -> usize {
        self.metrics
            .k
            .unwrap_or_else(|| 5.min(self.model.num_classes - 1))
    }

    /// SHA-256 of the canonical serialized config; embedded in every output
    /// artifact so results are traceable to their exact configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
