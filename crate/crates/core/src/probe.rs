//! kNN degradation-classification probe over frozen encoder features.
//!
//! Each sample's degraded image is center-cropped, optionally masked, passed through the
//! encoder, and its deepest tapped feature flattened. Samples are split 2:1 per family into
//! train and test sets and test samples are classified by majority vote of their `k`
//! Euclidean nearest training vectors. Accuracy is averaged over several seed repetitions;
//! each repetition draws its own split and a single mask shared by every sample.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{DegradationFamily, PairedSample};
use crate::error::{Error, IoContext, Result};
use crate::masking::{apply_mask, generate_mask, MaskMap, MaskingMethod};
use crate::model::Encoder;
use crate::nn::ParamStore;
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub k: usize,
    pub crop: usize,
    pub repeats: usize,
    pub mask_patch: usize,
    pub mask_method: MaskingMethod,
    /// Samples per family used for probing (manifest order); 0 means all.
    pub max_per_family: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            crop: 32,
            repeats: 5,
            mask_patch: 8,
            mask_method: MaskingMethod::Random,
            max_per_family: 40,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.crop == 0 || self.repeats == 0 || self.mask_patch == 0 {
            return Err(Error::InvalidConfig("probe k, crop, repeats and mask_patch must be positive".into()));
        }
        if !self.crop.is_multiple_of(self.mask_patch) {
            return Err(Error::InvalidConfig(format!(
                "probe crop {} is not a multiple of mask_patch {}",
                self.crop, self.mask_patch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Flattened features with labels and a stratified 2:1 split.
#[derive(Clone, Debug)]
pub struct ProbeDataset {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
}

/// Per label, shuffle the members with `seed` and send `round(2n/3)` to train, the rest to test.
pub fn stratified_split(labels: &[usize], seed: u64) -> Vec<Split> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let mut split = vec![Split::Test; labels.len()];
    for (label, mut members) in by_label {
        members.shuffle(&mut rng_from(derive_seed(seed, &[0x59_1177, label as u64])));
        let n_train = (2.0 * members.len() as f64 / 3.0).round() as usize;
        for &i in &members[..n_train] {
            split[i] = Split::Train;
        }
    }
    split
}

impl ProbeDataset {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<usize>, split_seed: u64) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::InvalidInput("feature and label counts differ".into()));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(Error::InvalidInput("feature vectors differ in length".into()));
            }
        }
        let split = stratified_split(&labels, split_seed);
        Ok(Self { features, labels, split })
    }

    fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|i| self.split[*i] == which).collect()
    }

    pub fn train(&self) -> (Vec<&[f32]>, Vec<usize>) {
        let idx = self.indices(Split::Train);
        (idx.iter().map(|&i| self.features[i].as_slice()).collect(), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Fraction of test samples classified correctly.
    pub fn accuracy(&self, k: usize) -> Result<f64> {
        let (train, train_labels) = self.train();
        let test = self.indices(Split::Test);
        if test.is_empty() {
            return Err(Error::InvalidInput("probe test split is empty".into()));
        }
        let hits = test
            .par_iter()
            .map(|&i| knn_classify(&train, &train_labels, &self.features[i], k).map(|p| (p == self.labels[i]) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / test.len() as f64)
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Majority vote of the `k` nearest training vectors (Euclidean).
///
/// Equal distances are ordered by training index. A vote tie goes to the label with the
/// smaller summed distance, then to the lower label.
pub fn knn_classify(train: &[&[f32]], labels: &[usize], query: &[f32], k: usize) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::InvalidInput("kNN training set is empty".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::InvalidParameter(format!("k = {k} with {} training vectors", train.len())));
    }
    if train.len() != labels.len() {
        return Err(Error::InvalidInput("kNN label count differs from training set".into()));
    }
    let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (euclidean(t, query), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(dist, i) in &d[..k] {
        let v = votes.entry(labels[i]).or_insert((0, 0.0));
        v.0 += 1;
        v.1 += dist;
    }
    let best = votes
        .iter()
        .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(b.0)))
        .map(|(l, _)| *l)
        .expect("k ≥ 1");
    Ok(best)
}

/// Up to `max_per_family` samples of each family, in input order (0 keeps all).
pub fn select_probe_samples(samples: &[PairedSample], max_per_family: usize) -> Vec<&PairedSample> {
    let mut seen: BTreeMap<DegradationFamily, usize> = BTreeMap::new();
    samples
        .iter()
        .filter(|s| {
            let n = seen.entry(s.family()).or_insert(0);
            *n += 1;
            max_per_family == 0 || *n <= max_per_family
        })
        .collect()
}

/// Deepest-tap features of center crops, all masked with one mask drawn from `seed` when
/// `mask_ratio > 0`. The split uses `seed` too.
#[allow(clippy::too_many_arguments)]
pub fn extract_probe_features(
    encoder: &Encoder,
    store: &ParamStore,
    samples: &[&PairedSample],
    crop: usize,
    mask_ratio: f64,
    mask_patch: usize,
    mask_method: MaskingMethod,
    seed: u64,
) -> Result<ProbeDataset> {
    let mask: Option<MaskMap> = if mask_ratio > 0.0 {
        Some(generate_mask(crop, crop, mask_patch, mask_ratio, mask_method, derive_seed(seed, &[0x3a5c])) ?)
    } else {
        if !(0.0..=1.0).contains(&mask_ratio) {
            return Err(Error::InvalidParameter(format!("mask ratio {mask_ratio} outside [0, 1]")));
        }
        None
    };
    let features = samples
        .par_iter()
        .map(|s| {
            if s.lq.height() < crop || s.lq.width() < crop {
                return Err(Error::InvalidInput(format!(
                    "{}: probe crop {crop} exceeds image {}×{}",
                    s.id,
                    s.lq.height(),
                    s.lq.width()
                )));
            }
            let x = s.lq.center_crop(crop, crop)?;
            let x = match &mask {
                Some(m) => apply_mask(&x, m)?,
                None => x,
            };
            let pyr = encoder.pyramid(store, &x, mask.as_ref())?;
            Ok(pyr.deepest().feature.data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = samples.iter().map(|s| s.family().index()).collect();
    ProbeDataset::new(features, labels, seed)
}

/// Mean test accuracy over `cfg.repeats` seed repetitions.
pub fn probe_accuracy(
    encoder: &Encoder,
    store: &ParamStore,
    samples: &[PairedSample],
    mask_ratio: f64,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let chosen = select_probe_samples(samples, cfg.max_per_family);
    let families: std::collections::BTreeSet<_> = chosen.iter().map(|s| s.family()).collect();
    if families.len() < 2 {
        return Err(Error::InvalidInput("probe needs at least two families".into()));
    }
    let mut total = 0.0;
    let mut cached: Option<Vec<Vec<f32>>> = None;
    for r in 0..cfg.repeats {
        let s = derive_seed(seed, &[r as u64]);
        let ds = if mask_ratio == 0.0 {
            if cached.is_none() {
                cached = Some(extract_probe_features(encoder, store, &chosen, cfg.crop, 0.0, cfg.mask_patch, cfg.mask_method, s)?.features);
            }
            let labels = chosen.iter().map(|x| x.family().index()).collect();
            ProbeDataset::new(cached.clone().expect("cached"), labels, s)?
        } else {
            extract_probe_features(encoder, store, &chosen, cfg.crop, mask_ratio, cfg.mask_patch, cfg.mask_method, s)?
        };
        total += ds.accuracy(cfg.k)?;
    }
    Ok(total / cfg.repeats as f64)
}

/// Probe accuracy at each mask ratio with shared seeds.
pub fn mask_ratio_sweep(
    encoder: &Encoder,
    store: &ParamStore,
    samples: &[PairedSample],
    ratios: &[f64],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&r| {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidParameter(format!("mask ratio {r} outside [0, 1]")));
            }
            probe_accuracy(encoder, store, samples, r, cfg, seed).map(|a| (r, a))
        })
        .collect()
}

/// Tab-separated `mask_ratio  accuracy` table.
pub fn sweep_table(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("mask_ratio\taccuracy\n");
    for (r, a) in rows {
        s.push_str(&format!("{r}\t{a:.6}\n"));
    }
    s
}

pub fn write_sweep(rows: &[(f64, f64)], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_table(rows)).at(path)
}
