//! Run configuration. Every field has a file key of the same name; defaults
//! reproduce the reference training schedule (batch 8, 250 autoencoder
//! epochs, 300 adversarial epochs, k = 3 diversity samples).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ArtemisError, Result};
use crate::params::AdamConfig;
use crate::vgg::BlockName;

/// How each batch decoder block picks its width from the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderChannelRule {
    /// `c = max(32, ⌊c′/2⌋)`
    #[default]
    Halving,
    /// `c = max(32, c′)`
    Literal,
}

impl DecoderChannelRule {
    pub fn next(self, prev: usize) -> usize {
        match self {
            Self::Halving => (prev / 2).max(32),
            Self::Literal => prev.max(32),
        }
    }
}

/// Extra term in the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LceMode {
    #[default]
    Off,
    /// Reconstruction loss of real batches through the pretrained encoders
    /// and the generator's decoder.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub data_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub vgg_weights: Option<PathBuf>,
    pub blocks: Vec<BlockName>,
    pub image_size: usize,
    pub batch_size: usize,
    pub ae_epochs: usize,
    pub gan_epochs: usize,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub k_diversity: usize,
    /// Read the label-noise parameter 0.01 as a standard deviation instead
    /// of a variance.
    pub label_noise_is_sigma: bool,
    pub l_ce_mode: LceMode,
    pub decoder_channel_rule: DecoderChannelRule,
    pub encoder_noise: bool,
    pub seed: u64,
    pub lr_ae: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_ga: f64,
    pub lambda_dv: f64,
    /// Checkpoint every N optimiser steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub run_name: String,
    /// Autoencoder checkpoint (file or stage directory) whose decoder seeds
    /// the generator. Defaults to the newest one in this run.
    pub pretrained: Option<PathBuf>,
    pub from_scratch: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            manifest: None,
            vgg_weights: None,
            blocks: vec![BlockName::Block1Conv1],
            image_size: 256,
            batch_size: 8,
            ae_epochs: 250,
            gan_epochs: 300,
            max_steps: None,
            k_diversity: 3,
            label_noise_is_sigma: false,
            l_ce_mode: LceMode::Off,
            decoder_channel_rule: DecoderChannelRule::Halving,
            encoder_noise: true,
            seed: 0,
            lr_ae: 2e-4,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_ga: 1.0,
            lambda_dv: 1.0,
            checkpoint_every: 0,
            run_name: "artemis".to_string(),
            pretrained: None,
            from_scratch: false,
        }
    }
}

pub const LABEL_NOISE_PARAM: f64 = 0.01;

impl TrainingConfig {
    /// Parse a `.json` file as JSON and anything else as TOML `key = value`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArtemisError::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| ArtemisError::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| ArtemisError::config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ArtemisError::Config(m));
        if ![64, 128, 256].contains(&self.image_size) {
            return fail(format!(
                "image_size must be 64, 128 or 256, got {}",
                self.image_size
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.blocks.is_empty() {
            return fail("at least one block is required".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if self.blocks[..i].contains(b) {
                return fail(format!("block {b} listed twice"));
            }
        }
        if self.k_diversity < 2 {
            return fail(format!(
                "k_diversity must be at least 2, got {}",
                self.k_diversity
            ));
        }
        for (name, lr) in [
            ("lr_ae", self.lr_ae),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        for (name, l) in [("lambda_ga", self.lambda_ga), ("lambda_dv", self.lambda_dv)] {
            if !l.is_finite() || l < 0.0 {
                return fail(format!("{name} must be non-negative, got {l}"));
            }
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return fail(format!("invalid run_name {:?}", self.run_name));
        }
        Ok(())
    }

    /// Standard deviation of the Gaussian label noise.
    pub fn label_noise_sigma(&self) -> f64 {
        if self.label_noise_is_sigma {
            LABEL_NOISE_PARAM
        } else {
            LABEL_NOISE_PARAM.sqrt()
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `<runs root>/<run_name>`.
    pub fn run_dir(&self) -> PathBuf {
        Self::runs_root().join(&self.run_name)
    }

    /// Run root: `ARTEMIS_RUNS_DIR` if set, else `./runs`.
    pub fn runs_root() -> PathBuf {
        std::env::var_os("ARTEMIS_RUNS_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
