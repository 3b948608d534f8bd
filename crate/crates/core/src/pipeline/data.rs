use rand::Rng;

use super::config::TrainConfig;
use super::sampler::RepeatSampler;
use crate::degrade::PairedSample;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masking::{generate_mask, MaskMap};
use crate::seed::{derive_seed, rng_from};

const DATA_STREAM: u64 = 0xda7a;
const MASK_STREAM: u64 = 0x3a5c;

/// Split sample indices into (train, held-out). Within each family, in input order, sample
/// `j` is held out when `floor((j+1)·f) > floor(j·f)`.
pub fn holdout_split(samples: &[PairedSample], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::BTreeMap::new();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let j = seen.entry(s.family()).or_insert(0u64);
        let hold = (((*j + 1) as f64) * fraction).floor() > ((*j as f64) * fraction).floor();
        *j += 1;
        if hold {
            held.push(i)
        } else {
            train.push(i)
        }
    }
    (train, held)
}

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub lq: ImageTensor,
    pub gt: ImageTensor,
    pub target: usize,
    pub mask: Option<MaskMap>,
}

/// Identical random crop (and optional flip) of a degraded/clean pair.
pub fn random_crop_pair(
    lq: &ImageTensor,
    gt: &ImageTensor,
    crop: usize,
    flip: bool,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    let (h, w) = (lq.height(), lq.width());
    if h < crop || w < crop {
        return Err(Error::InvalidInput(format!("crop {crop} exceeds image {h}×{w}")));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let (mut a, mut b) = (lq.crop(top, left, crop, crop)?, gt.crop(top, left, crop, crop)?);
    if flip && rng.random_bool(0.5) {
        a = a.flip_horizontal();
        b = b.flip_horizontal();
    }
    Ok((a, b))
}

/// Batch for iteration `iteration` (0-based): slot `s` takes stream position
/// `iteration·B + s`; crops and masks use seeds derived from `(seed, iteration, s)`.
pub fn prepare_batch(
    samples: &[PairedSample],
    pool: &[usize],
    sampler: &RepeatSampler,
    cfg: &TrainConfig,
    iteration: u64,
    with_mask: bool,
) -> Result<Vec<TrainItem>> {
    (0..cfg.batch_size)
        .map(|slot| {
            let pos = iteration * cfg.batch_size as u64 + slot as u64;
            let s = &samples[pool[sampler.at(pos)]];
            let mut rng = rng_from(derive_seed(cfg.seed, &[DATA_STREAM, iteration, slot as u64]));
            let (lq, gt) = random_crop_pair(&s.lq, &s.gt, cfg.crop_size, cfg.flip, &mut rng)?;
            let mask = if with_mask {
                Some(generate_mask(
                    cfg.crop_size,
                    cfg.crop_size,
                    cfg.mask_patch,
                    cfg.mask_ratio,
                    cfg.mask_method,
                    derive_seed(cfg.seed, &[MASK_STREAM, iteration, slot as u64]),
                )?)
            } else {
                None
            };
            Ok(TrainItem {
                id: s.id.clone(),
                lq,
                gt,
                target: s.family().index(),
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{DegradationFamily, DegradationSpec};

    fn sample(f: DegradationFamily, i: usize) -> PairedSample {
        let gt = ImageTensor::filled(4, 4, 3, 0.5);
        PairedSample {
            lq: gt.clone(),
            gt,
            spec: DegradationSpec {
                family: f,
                params: Default::default(),
                seed: 0,
            },
            id: format!("{i}"),
        }
    }

    #[test]
    fn holdout_takes_every_fifth_per_family() {
        let samples: Vec<_> = (0..20)
            .map(|i| sample(if i % 2 == 0 { DegradationFamily::Haze } else { DegradationFamily::LowLight }, i))
            .collect();
        let (train, held) = holdout_split(&samples, 0.2);
        assert_eq!(held, vec![8, 9, 18, 19]);
        assert_eq!(train.len(), 16);
        let (train, held) = holdout_split(&samples, 0.0);
        assert_eq!((train.len(), held.len()), (20, 0));
    }
}
