use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;

use crate::degrade::DegradationFamily;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Repetition factors `[1H, 300RS, 15GN, 5MB, 60LL]` for the long-tailed 5D training set.
pub fn reference_repeat_factors() -> BTreeMap<DegradationFamily, usize> {
    use DegradationFamily::*;
    BTreeMap::from([(Haze, 1), (RainStreak, 300), (GaussianNoise, 15), (MotionBlur, 5), (LowLight, 60)])
}

/// Per-family sample counts after repetition.
pub fn effective_counts(
    counts: &BTreeMap<DegradationFamily, usize>,
    factors: &BTreeMap<DegradationFamily, usize>,
) -> BTreeMap<DegradationFamily, usize> {
    counts.iter().map(|(f, n)| (*f, n * factors.get(f).copied().unwrap_or(1))).collect()
}

/// Parse `"1H,300RS,15GN"` or `"HAZE=1,RAIN_STREAK=300"`.
pub fn parse_factors(s: &str) -> Result<BTreeMap<DegradationFamily, usize>> {
    let mut out = BTreeMap::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (n, fam) = match item.split_once('=') {
            Some((fam, n)) => (n.trim(), fam.trim()),
            None => {
                let split = item.find(|c: char| !c.is_ascii_digit()).unwrap_or(item.len());
                (&item[..split], &item[split..])
            }
        };
        let n: usize = n
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad repeat factor {item:?}")))?;
        out.insert(fam.parse()?, n);
    }
    Ok(out)
}

/// Epochs are shuffled permutations of the multiset `{sample × factor(family)}`.
///
/// Position `p` of the infinite stream lives in epoch `p / epoch_len`; each epoch is shuffled
/// with a seed derived from `(seed, epoch)`, so any position can be recomputed in isolation.
#[derive(Debug)]
pub struct RepeatSampler {
    base: Vec<usize>,
    seed: u64,
    cache: Mutex<Option<(u64, Vec<usize>)>>,
}

impl Clone for RepeatSampler {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            seed: self.seed,
            cache: Mutex::new(None),
        }
    }
}

/// Build a sampler over samples labelled by `families` (one entry per corpus sample).
///
/// Families without a factor repeat once. Factors for families absent from the corpus are
/// ignored with a warning; a zero factor for a present family is an error.
pub fn make_repeat_sampler(
    families: &[DegradationFamily],
    factors: &BTreeMap<DegradationFamily, usize>,
    seed: u64,
) -> Result<RepeatSampler> {
    if families.is_empty() {
        return Err(Error::InvalidInput("cannot sample from an empty corpus".into()));
    }
    for (f, n) in factors {
        if !families.contains(f) {
            log::warn!("repeat factor {n} for {f} ignored: family absent from corpus");
        } else if *n == 0 {
            return Err(Error::InvalidParameter(format!("repeat factor for {f} must be ≥ 1")));
        }
    }
    let base = families
        .iter()
        .enumerate()
        .flat_map(|(i, f)| std::iter::repeat_n(i, factors.get(f).copied().unwrap_or(1)))
        .collect();
    Ok(RepeatSampler {
        base,
        seed,
        cache: Mutex::new(None),
    })
}

impl RepeatSampler {
    pub fn epoch_len(&self) -> usize {
        self.base.len()
    }

    /// Sample indices of one epoch, in draw order.
    pub fn epoch(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.base.clone();
        order.shuffle(&mut rng_from(derive_seed(self.seed, &[0x5a4d, epoch])));
        order
    }

    /// Sample index at stream position `pos`.
    pub fn at(&self, pos: u64) -> usize {
        let len = self.base.len() as u64;
        let (epoch, off) = (pos / len, (pos % len) as usize);
        let mut cache = self.cache.lock().expect("sampler cache");
        match &*cache {
            Some((e, order)) if *e == epoch => order[off],
            _ => {
                let order = self.epoch(epoch);
                let v = order[off];
                *cache = Some((epoch, order));
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use DegradationFamily::*;

    #[test]
    fn reference_effective_counts() {
        let eff = effective_counts(&crate::degrade::reference_5d_counts(), &reference_repeat_factors());
        assert_eq!(eff.values().copied().collect::<Vec<_>>(), vec![72135, 60000, 77160, 10515, 29100]);
    }

    #[test]
    fn toy_epoch_histogram() {
        let fams = [Haze, Haze, Haze, LowLight];
        let s = make_repeat_sampler(&fams, &BTreeMap::from([(Haze, 1), (LowLight, 3)]), 4).unwrap();
        assert_eq!(s.epoch_len(), 6);
        for e in 0..5 {
            let ep = s.epoch(e);
            assert_eq!(ep.iter().filter(|i| **i == 3).count(), 3);
            let mut sorted = ep.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3, 3, 3]);
            for (k, v) in ep.iter().enumerate() {
                assert_eq!(s.at(e * 6 + k as u64), *v);
            }
        }
    }

    #[test]
    fn factors_parse_and_validate() {
        assert_eq!(parse_factors("1H,300RS,15GN,5MB,60LL").unwrap(), reference_repeat_factors());
        assert_eq!(parse_factors("LOW_LIGHT=2").unwrap(), BTreeMap::from([(LowLight, 2)]));
        assert!(make_repeat_sampler(&[Haze], &BTreeMap::from([(Haze, 0)]), 0).is_err());
        assert_eq!(make_repeat_sampler(&[Haze], &BTreeMap::from([(LowLight, 9)]), 0).unwrap().epoch_len(), 1);
    }
}
