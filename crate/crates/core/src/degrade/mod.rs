//! Synthetic degradations and paired corpora.
//!
//! Five families are supported, one per 5D all-in-one task: haze, rain streaks,
//! Gaussian noise, motion blur and low light. Every generator is a pure function of
//! its inputs and seed; outputs are clipped to `[0, 1]` and keep the input shape.
//!
//! Synthesis models (all constants are fixed so results are exactly reproducible):
//!
//! | family | model |
//! |---|---|
//! | haze | `I = J·t + A·(1 − t)`, `t = exp(−β·d)`, `d(y) = 1 − y/(H−1)` (top row is farthest) |
//! | rain | additive streak layer: straight segments of length `max(3, min(H,W)/4)`, angle from vertical, per-streak intensity `U[0.25, 0.5]`, drawn until the touched fraction reaches the density |
//! | noise | `J + n`, `n ~ N(0, (σ/255)²)` i.i.d. per channel |
//! | blur | normalized linear kernel of odd length `L` at angle θ, reflect padding |
//! | low light | `s·J^γ + n`, `n ~ N(0, σ_read²)` |

mod corpus;
mod ops;
pub mod texture;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use corpus::{
    build_corpus, load_corpus, reference_5d_counts, scaled_counts, CleanSource, CorpusEntry, CorpusManifest,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use ops::{apply_gaussian_noise, apply_haze, apply_low_light, apply_motion_blur, apply_rain_streaks, motion_kernel};

/// Degradation family; the discriminant is the class index used by the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DegradationFamily {
    Haze = 0,
    RainStreak = 1,
    GaussianNoise = 2,
    MotionBlur = 3,
    LowLight = 4,
}

impl DegradationFamily {
    pub const ALL: [DegradationFamily; 5] = [
        DegradationFamily::Haze,
        DegradationFamily::RainStreak,
        DegradationFamily::GaussianNoise,
        DegradationFamily::MotionBlur,
        DegradationFamily::LowLight,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Haze => "HAZE",
            Self::RainStreak => "RAIN_STREAK",
            Self::GaussianNoise => "GAUSSIAN_NOISE",
            Self::MotionBlur => "MOTION_BLUR",
            Self::LowLight => "LOW_LIGHT",
        }
    }

    /// Short tag used in sample ids and repeat-factor lists (`H`, `RS`, `GN`, `MB`, `LL`).
    pub fn abbrev(self) -> &'static str {
        match self {
            Self::Haze => "H",
            Self::RainStreak => "RS",
            Self::GaussianNoise => "GN",
            Self::MotionBlur => "MB",
            Self::LowLight => "LL",
        }
    }

    /// Parameter names a [`DegradationSpec`] of this family must carry.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Self::Haze => &["beta", "airlight"],
            Self::RainStreak => &["streak_density", "angle_deg"],
            Self::GaussianNoise => &["sigma"],
            Self::MotionBlur => &["kernel_length", "angle_deg"],
            Self::LowLight => &["gamma", "scale", "read_noise_sigma"],
        }
    }
}

impl fmt::Display for DegradationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|f| f.name() == norm || f.abbrev() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown degradation family {s:?}")))
    }
}

/// A degradation family with its level parameters: the classification target of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub family: DegradationFamily,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(family: DegradationFamily, params: &[(&str, f64)], seed: u64) -> Result<Self> {
        let spec = Self {
            family,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("{} spec is missing {name}", self.family)))
    }

    /// Check presence and documented ranges of the family's parameters.
    pub fn validate(&self) -> Result<()> {
        for name in self.family.param_names() {
            let v = self.param(name)?;
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} is not finite")));
            }
        }
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match self.family {
            DegradationFamily::Haze => {
                let beta = self.param("beta")?;
                if !(beta > 0.0 && beta <= 3.0) {
                    return bad(format!("beta {beta} outside (0, 3]"));
                }
                let a = self.param("airlight")?;
                if !(0.7..=1.0).contains(&a) {
                    return bad(format!("airlight {a} outside [0.7, 1]"));
                }
            }
            DegradationFamily::RainStreak => {
                let d = self.param("streak_density")?;
                if !(d > 0.0 && d <= 0.2) {
                    return bad(format!("streak_density {d} outside (0, 0.2]"));
                }
            }
            DegradationFamily::GaussianNoise => {
                let s = self.param("sigma")?;
                if !(1.0..=100.0).contains(&s) {
                    return bad(format!("sigma {s} outside [1, 100]"));
                }
            }
            DegradationFamily::MotionBlur => {
                let l = self.param("kernel_length")?;
                if l.fract() != 0.0 || !(3.0..=31.0).contains(&l) || (l as u64).is_multiple_of(2) {
                    return bad(format!("kernel_length {l} must be an odd integer in [3, 31]"));
                }
            }
            DegradationFamily::LowLight => {
                let g = self.param("gamma")?;
                if !(1.5..=4.0).contains(&g) {
                    return bad(format!("gamma {g} outside [1.5, 4]"));
                }
                let s = self.param("scale")?;
                if !(s > 0.0 && s <= 1.0) {
                    return bad(format!("scale {s} outside (0, 1]"));
                }
                let n = self.param("read_noise_sigma")?;
                if n < 0.0 {
                    return bad(format!("read_noise_sigma {n} is negative"));
                }
            }
        }
        Ok(())
    }

    /// Degrade `gt` according to this spec. `gt` is never modified.
    pub fn apply(&self, gt: &ImageTensor) -> Result<ImageTensor> {
        self.validate()?;
        let p = |n: &str| self.param(n);
        match self.family {
            DegradationFamily::Haze => apply_haze(gt, p("beta")?, p("airlight")?),
            DegradationFamily::RainStreak => apply_rain_streaks(gt, p("streak_density")?, p("angle_deg")?, self.seed),
            DegradationFamily::GaussianNoise => apply_gaussian_noise(gt, p("sigma")?, self.seed),
            DegradationFamily::MotionBlur => apply_motion_blur(gt, p("kernel_length")? as usize, p("angle_deg")?),
            DegradationFamily::LowLight => {
                apply_low_light(gt, p("gamma")?, p("scale")?, p("read_noise_sigma")?, self.seed)
            }
        }
    }
}

/// A degraded/clean pair with its degradation label.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub lq: ImageTensor,
    pub gt: ImageTensor,
    pub spec: DegradationSpec,
    pub id: String,
}

impl PairedSample {
    pub fn family(&self) -> DegradationFamily {
        self.spec.family
    }
}

/// Inclusive sampling ranges for each family's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges(pub BTreeMap<DegradationFamily, BTreeMap<String, [f64; 2]>>);

impl Default for ParamRanges {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        let mk = |items: &[(&str, f64, f64)]| -> BTreeMap<String, [f64; 2]> {
            items.iter().map(|(k, lo, hi)| (k.to_string(), [*lo, *hi])).collect()
        };
        m.insert(DegradationFamily::Haze, mk(&[("beta", 0.8, 2.5), ("airlight", 0.75, 1.0)]));
        m.insert(
            DegradationFamily::RainStreak,
            mk(&[("streak_density", 0.04, 0.12), ("angle_deg", -20.0, 20.0)]),
        );
        m.insert(DegradationFamily::GaussianNoise, mk(&[("sigma", 15.0, 50.0)]));
        m.insert(
            DegradationFamily::MotionBlur,
            mk(&[("kernel_length", 5.0, 11.0), ("angle_deg", 0.0, 180.0)]),
        );
        m.insert(
            DegradationFamily::LowLight,
            mk(&[("gamma", 1.5, 3.0), ("scale", 0.25, 0.6), ("read_noise_sigma", 0.0, 0.01)]),
        );
        ParamRanges(m)
    }
}

impl ParamRanges {
    /// Draw parameters uniformly; `kernel_length` is drawn uniformly over the odd integers in range.
    pub fn sample(&self, family: DegradationFamily, rng: &mut impl Rng) -> Result<Vec<(String, f64)>> {
        let ranges = self
            .0
            .get(&family)
            .ok_or_else(|| Error::InvalidParameter(format!("no parameter ranges for {family}")))?;
        family
            .param_names()
            .iter()
            .map(|&name| {
                let [lo, hi] = *ranges
                    .get(name)
                    .ok_or_else(|| Error::InvalidParameter(format!("no range for {family}.{name}")))?;
                if !(lo <= hi) {
                    return Err(Error::InvalidParameter(format!("empty range for {family}.{name}")));
                }
                let v = if name == "kernel_length" {
                    let first = (lo.ceil() as i64) | 1;
                    let last = hi.floor() as i64;
                    if first > last {
                        return Err(Error::InvalidParameter(format!("no odd kernel length in [{lo}, {hi}]")));
                    }
                    let choices = (last - first) / 2 + 1;
                    (first + 2 * rng.random_range(0..choices)) as f64
                } else if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                };
                Ok((name.to_string(), v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn family_parsing_accepts_names_and_abbreviations() {
        assert_eq!("rs".parse::<DegradationFamily>().unwrap(), DegradationFamily::RainStreak);
        assert_eq!("low-light".parse::<DegradationFamily>().unwrap(), DegradationFamily::LowLight);
        assert!("snow".parse::<DegradationFamily>().is_err());
        for f in DegradationFamily::ALL {
            assert_eq!(DegradationFamily::from_index(f.index()), Some(f));
        }
    }

    #[test]
    fn spec_validation_ranges() {
        use DegradationFamily::*;
        assert!(DegradationSpec::new(GaussianNoise, &[("sigma", 0.5)], 0).is_err());
        assert!(DegradationSpec::new(GaussianNoise, &[("sigma", 25.0)], 0).is_ok());
        assert!(DegradationSpec::new(MotionBlur, &[("kernel_length", 4.0), ("angle_deg", 0.0)], 0).is_err());
        assert!(DegradationSpec::new(MotionBlur, &[("kernel_length", 33.0), ("angle_deg", 0.0)], 0).is_err());
        assert!(DegradationSpec::new(LowLight, &[("gamma", 1.0), ("scale", 0.5), ("read_noise_sigma", 0.0)], 0).is_err());
        assert!(DegradationSpec::new(RainStreak, &[("streak_density", 0.3), ("angle_deg", 0.0)], 0).is_err());
        assert!(DegradationSpec::new(Haze, &[("beta", 3.5), ("airlight", 0.9)], 0).is_err());
        assert!(DegradationSpec::new(Haze, &[("beta", 1.0)], 0).is_err());
    }

    #[test]
    fn sampled_params_validate() {
        let ranges = ParamRanges::default();
        let mut rng = rng_from(3);
        for f in DegradationFamily::ALL {
            for _ in 0..50 {
                let p = ranges.sample(f, &mut rng).unwrap();
                let refs: Vec<(&str, f64)> = p.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                DegradationSpec::new(f, &refs, 1).unwrap();
            }
        }
    }
}
