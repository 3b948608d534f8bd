use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::DegradationFamily;
use crate::error::{Error, IoContext, Result};
use crate::masking::MaskingMethod;
use crate::model::{DecoderConfig, EncoderConfig};
use crate::probe::ProbeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Settings of one training run. Every key has a default, so a TOML table may list only overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Encoder learning rate; in fine-tuning the start of the cosine schedule for all parameters.
    pub lr_encoder: f64,
    /// Decoder learning rate (pre-training only).
    pub lr_decoder: f64,
    /// End of the fine-tuning cosine schedule.
    pub lr_min: f64,
    pub mask_ratio: f64,
    pub mask_patch: usize,
    pub mask_method: MaskingMethod,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Random horizontal flips of training crops.
    pub flip: bool,
    pub repeat_factors: BTreeMap<DegradationFamily, usize>,
    /// Fraction of each family held out from training for evaluation.
    pub holdout_fraction: f64,
    /// Save a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    /// Fractions of the run at which the kNN probe is logged (pre-training only).
    pub probe_fractions: Vec<f64>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            iterations: 2000,
            batch_size: 8,
            crop_size: 64,
            lr_encoder: 3e-4,
            lr_decoder: 1e-4,
            lr_min: 1e-6,
            mask_ratio: 0.5,
            mask_patch: 8,
            mask_method: MaskingMethod::Random,
            alpha: 1.0,
            gamma: 2.0,
            seed: 0,
            flip: true,
            repeat_factors: BTreeMap::new(),
            holdout_fraction: 0.2,
            checkpoint_every: 0,
            probe_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn finetune_default() -> Self {
        Self {
            mode: TrainMode::Finetune,
            probe_fractions: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.crop_size == 0 {
            return bad("batch_size and crop_size must be positive".into());
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_decoder", self.lr_decoder), ("lr_min", self.lr_min)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("alpha and gamma must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if self.probe_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("probe_fractions must lie in [0, 1]".into());
        }
        if self.mode == TrainMode::Pretrain {
            if !(0.0..=1.0).contains(&self.mask_ratio) {
                return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
            }
            if self.mask_patch == 0 || !self.crop_size.is_multiple_of(self.mask_patch) {
                return bad(format!(
                    "crop_size {} is not a multiple of mask_patch {}",
                    self.crop_size, self.mask_patch
                ));
            }
            self.decoder.validate()?;
            if !self.probe_fractions.is_empty() {
                self.probe.validate()?;
            }
        }
        self.encoder.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Iterations at which the probe runs: `round(f · iterations)`, deduplicated, ascending.
    pub fn probe_iterations(&self) -> Vec<u64> {
        let mut its: Vec<u64> = self
            .probe_fractions
            .iter()
            .map(|f| (f * self.iterations as f64).round() as u64)
            .collect();
        its.sort_unstable();
        its.dedup();
        its
    }
}

/// Corpus synthesis settings used by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub counts: BTreeMap<DegradationFamily, usize>,
    pub seed: u64,
    /// Clean image directory; procedural textures when absent.
    pub clean_dir: Option<String>,
    pub procedural_count: usize,
    pub procedural_size: usize,
    pub ranges: Option<crate::degrade::ParamRanges>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            counts: DegradationFamily::ALL.into_iter().map(|f| (f, 64)).collect(),
            seed: 0,
            clean_dir: None,
            procedural_count: 64,
            procedural_size: 96,
            ranges: None,
        }
    }
}

/// One file holding corpus, pre-training and fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.pretrain.mode = TrainMode::Pretrain;
        cfg.finetune.mode = TrainMode::Finetune;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}
