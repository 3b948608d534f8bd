use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::texture::procedural_image;
use super::{DegradationFamily, DegradationSpec, PairedSample, ParamRanges};
use crate::error::{Error, IoContext, Result};
use crate::image::ImageTensor;
use crate::seed::{derive_seed, rng_from};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Where clean images come from.
#[derive(Clone, Debug)]
pub enum CleanSource {
    /// Every PNG/JPEG/BMP file in the directory, in file-name order.
    Dir(PathBuf),
    /// `count` procedural textures of the given size.
    Procedural { count: usize, height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub family: DegradationFamily,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub clean: String,
    pub lq_path: String,
    pub gt_path: String,
    pub lq_sha256: String,
    pub gt_sha256: String,
    pub height: usize,
    pub width: usize,
}

impl CorpusEntry {
    pub fn spec(&self) -> DegradationSpec {
        DegradationSpec {
            family: self.family,
            params: self.params.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub counts: BTreeMap<DegradationFamily, usize>,
    pub entries: Vec<CorpusEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Training-set sizes of the 5D all-in-one setting, in family order.
pub fn reference_5d_counts() -> BTreeMap<DegradationFamily, usize> {
    use DegradationFamily::*;
    BTreeMap::from([(Haze, 72135), (RainStreak, 200), (GaussianNoise, 5144), (MotionBlur, 2103), (LowLight, 485)])
}

/// Counts divided by `divisor`, rounded half away from zero.
pub fn scaled_counts(
    counts: &BTreeMap<DegradationFamily, usize>,
    divisor: f64,
) -> BTreeMap<DegradationFamily, usize> {
    counts.iter().map(|(f, n)| (*f, (*n as f64 / divisor).round() as usize)).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn list_clean_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    files.sort();
    Ok(files)
}

enum Clean {
    Files(Vec<(String, ImageTensor)>),
    Procedural { count: usize, height: usize, width: usize, seed: u64 },
}

impl Clean {
    fn len(&self) -> usize {
        match self {
            Clean::Files(v) => v.len(),
            Clean::Procedural { count, .. } => *count,
        }
    }

    fn get(&self, i: usize) -> (String, ImageTensor) {
        match self {
            Clean::Files(v) => v[i].clone(),
            Clean::Procedural { height, width, seed, .. } => {
                (format!("procedural:{i}"), procedural_image(i, *height, *width, *seed))
            }
        }
    }
}

/// Synthesize a paired corpus under `out_root` and write its manifest.
///
/// Entries are ordered by family, then by index within the family. Sample `i` draws its clean
/// image, parameters and degradation seed from seeds derived from `(seed, i)` only.
pub fn build_corpus(
    clean: &CleanSource,
    out_root: &Path,
    counts: &BTreeMap<DegradationFamily, usize>,
    ranges: &ParamRanges,
    seed: u64,
) -> Result<CorpusManifest> {
    let clean = match clean {
        CleanSource::Dir(dir) => {
            let files = list_clean_dir(dir)?;
            let loaded: Vec<(String, ImageTensor)> = files
                .iter()
                .filter_map(|p| {
                    let name = p.file_name()?.to_string_lossy().into_owned();
                    match ImageTensor::load(p) {
                        Ok(img) => Some((name, img)),
                        Err(e) => {
                            log::warn!("skipping unreadable clean image {}: {e}", p.display());
                            None
                        }
                    }
                })
                .collect();
            if loaded.is_empty() {
                return Err(Error::InvalidInput(format!("no readable images in {}", dir.display())));
            }
            Clean::Files(loaded)
        }
        CleanSource::Procedural { count, height, width } => {
            if *count == 0 || *height == 0 || *width == 0 {
                return Err(Error::InvalidInput("procedural clean source is empty".into()));
            }
            Clean::Procedural { count: *count, height: *height, width: *width, seed }
        }
    };

    for dir in ["lq", "gt"] {
        let p = out_root.join(dir);
        fs::create_dir_all(&p).at(&p)?;
    }

    let jobs: Vec<(usize, DegradationFamily, usize)> = counts
        .iter()
        .flat_map(|(f, n)| (0..*n).map(move |j| (*f, j)))
        .enumerate()
        .map(|(i, (f, j))| (i, f, j))
        .collect();

    let entries = jobs
        .par_iter()
        .map(|&(i, family, j)| -> Result<CorpusEntry> {
            let pick = derive_seed(seed, &[i as u64, 1]) as usize % clean.len();
            let (clean_name, gt) = clean.get(pick);
            let params = ranges.sample(family, &mut rng_from(derive_seed(seed, &[i as u64, 2])))?;
            let spec = DegradationSpec {
                family,
                params: params.into_iter().collect(),
                seed: derive_seed(seed, &[i as u64, 3]),
            };
            let lq = spec.apply(&gt)?;
            let id = format!("{}_{j:05}", family.abbrev());
            let lq_path = format!("lq/{id}.png");
            let gt_path = format!("gt/{id}.png");
            let lq_png = lq.to_png_bytes()?;
            let gt_png = gt.to_png_bytes()?;
            fs::write(out_root.join(&lq_path), &lq_png).at(out_root.join(&lq_path))?;
            fs::write(out_root.join(&gt_path), &gt_png).at(out_root.join(&gt_path))?;
            Ok(CorpusEntry {
                id,
                family,
                params: spec.params,
                seed: spec.seed,
                clean: clean_name,
                lq_path,
                gt_path,
                lq_sha256: sha256_hex(&lq_png),
                gt_sha256: sha256_hex(&gt_png),
                height: gt.height(),
                width: gt.width(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed,
        counts: DegradationFamily::ALL
            .into_iter()
            .map(|f| (f, counts.get(&f).copied().unwrap_or(0)))
            .collect(),
        entries,
        root: out_root.to_path_buf(),
    };
    let path = out_root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").at(&path)?;
    Ok(manifest)
}

impl CorpusManifest {
    /// Read and validate a manifest; `path` may be the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).at(&file)?;
        let mut m: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::CorruptCorpus(format!("{}: {e}", file.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::CorruptCorpus(format!("unsupported manifest version {}", m.version)));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let hist = m.histogram();
        for f in DegradationFamily::ALL {
            let want = m.counts.get(&f).copied().unwrap_or(0);
            let got = hist.get(&f).copied().unwrap_or(0);
            if want != got {
                return Err(Error::CorruptCorpus(format!("{f}: manifest counts {want}, entries {got}")));
            }
        }
        for e in &m.entries {
            for rel in [&e.lq_path, &e.gt_path] {
                if !m.root.join(rel).is_file() {
                    return Err(Error::CorruptCorpus(format!("{}: missing file {rel}", e.id)));
                }
            }
        }
        Ok(m)
    }

    pub fn histogram(&self) -> BTreeMap<DegradationFamily, usize> {
        let mut h = BTreeMap::new();
        for e in &self.entries {
            *h.entry(e.family).or_insert(0) += 1;
        }
        h
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load one entry, verifying checksums and shapes.
    pub fn load_sample(&self, index: usize) -> Result<PairedSample> {
        let e = &self.entries[index];
        let read = |rel: &str, sum: &str| -> Result<ImageTensor> {
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|err| Error::CorruptCorpus(format!("{}: {err}", path.display())))?;
            if sha256_hex(&bytes) != sum {
                return Err(Error::CorruptCorpus(format!("{}: checksum mismatch", path.display())));
            }
            let img = image::load_from_memory(&bytes)
                .map_err(|err| Error::CorruptCorpus(format!("{}: {err}", path.display())))?;
            ImageTensor::from_dynamic(&img)
        };
        let lq = read(&e.lq_path, &e.lq_sha256)?;
        let gt = read(&e.gt_path, &e.gt_sha256)?;
        if !lq.same_shape(&gt) || gt.height() != e.height || gt.width() != e.width {
            return Err(Error::CorruptCorpus(format!("{}: shape mismatch", e.id)));
        }
        Ok(PairedSample {
            lq,
            gt,
            spec: e.spec(),
            id: e.id.clone(),
        })
    }

    /// Samples in manifest order.
    pub fn samples(&self) -> impl Iterator<Item = Result<PairedSample>> + '_ {
        (0..self.entries.len()).map(|i| self.load_sample(i))
    }
}

/// Load every sample of a corpus into memory, in manifest order.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<PairedSample>> {
    let m = CorpusManifest::load(manifest_path)?;
    (0..m.len()).into_par_iter().map(|i| m.load_sample(i)).collect()
}
