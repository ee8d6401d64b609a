//! The run configuration file.
//!
//! A config file is one JSON document with every key of [`RunConfig`]
//! present; unknown and missing keys are both rejected. `cprl print-config`
//! prints the built-in defaults in this format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::LandscapeSpec;
use crate::attacks::AttackSpec;
use crate::data::{GenerateConfig, IngestOptions};
use crate::error::{CprlError, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the synthetic generator; independent of the run seed.
    pub seed: u64,
    /// Used when no dataset directory is given.
    pub generate: GenerateConfig,
    /// Seed of the scene split when the dataset carries no `split.json`.
    pub split_seed: u64,
    /// Declared range of raw manifest labels when ingesting.
    pub label_range: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generate: GenerateConfig::default(),
            split_seed: 0,
            label_range: [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilon_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilon_grid: (0..=4).map(|i| i as f64 / 255.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Number of held-out images used by `landscape` and `dump`.
    pub images: usize,
    pub landscape: LandscapeSpec,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            images: 10,
            landscape: LandscapeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; `null` falls back to `$CPRL_OUT_ROOT`, then `runs`.
    pub output_root: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackSpec,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attack: AttackSpec::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CprlError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CprlError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: CprlError| match e {
            CprlError::InvalidArgument(m) => CprlError::Config(m),
            other => other,
        };
        self.data.generate.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.attack.validate().map_err(wrap)?;
        self.analysis.landscape.validate().map_err(wrap)?;
        let [lo, hi] = self.data.label_range;
        if !(lo < hi) {
            return Err(CprlError::Config(format!(
                "label range [{lo}, {hi}] is empty"
            )));
        }
        if self.sweep.epsilon_grid.is_empty() {
            return Err(CprlError::Config("epsilon grid is empty".into()));
        }
        if self.sweep.epsilon_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(CprlError::Config(
                "epsilon grid must be sorted ascending".into(),
            ));
        }
        if self.analysis.images == 0 {
            return Err(CprlError::Config(
                "analysis needs at least one image".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(compact.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            image_size: self.model.image_size,
            channels: self.model.input_channels,
            label_range: self.data.label_range,
        }
    }
}
