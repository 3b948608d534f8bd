#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use maskdcpt_core::degrade::{build_corpus, load_corpus, CleanSource, DegradationFamily, PairedSample, ParamRanges};
use maskdcpt_core::model::{DecoderConfig, EncoderConfig};
use maskdcpt_core::pipeline::TrainConfig;
use maskdcpt_core::probe::ProbeConfig;

pub fn counts(families: &[DegradationFamily], n: usize) -> BTreeMap<DegradationFamily, usize> {
    families.iter().map(|f| (*f, n)).collect()
}

/// Procedural corpus written under `dir` and loaded back.
pub fn corpus(dir: &Path, families: &[DegradationFamily], per_family: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    let clean = CleanSource::Procedural {
        count: 24,
        height: size,
        width: size,
    };
    build_corpus(&clean, dir, &counts(families, per_family), &ParamRanges::default(), seed).unwrap();
    load_corpus(dir).unwrap()
}

pub fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        blocks_per_stage: 1,
        base_width: 4,
        max_width: 8,
        recon_channels: 4,
        ..DecoderConfig::default()
    }
}

/// Very small pre-training config for fast tests.
pub fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        batch_size: 2,
        crop_size: 16,
        mask_patch: 4,
        encoder: EncoderConfig::plain(vec![4, 4, 4]),
        decoder: small_decoder(),
        probe_fractions: Vec::new(),
        probe: ProbeConfig {
            crop: 16,
            repeats: 2,
            mask_patch: 4,
            ..ProbeConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn tiny_finetune() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        ..TrainConfig {
            mode: maskdcpt_core::pipeline::TrainMode::Finetune,
            ..tiny_cfg()
        }
    }
}
