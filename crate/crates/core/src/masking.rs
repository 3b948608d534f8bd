//! Patch masks and their application, `x̄ = M ⊙ x`.
//!
//! A [`MaskMap`] is a boolean grid over non-overlapping `patch_size × patch_size` patches,
//! `true` meaning KEPT. Generation always masks exactly `round(ratio · P)` of the `P` patches.
//!
//! Geometry of the structured methods:
//! - `SQUARE` grows a square of masked patches around the grid center, ring by ring in the
//!   Chebyshev metric. A partially filled outer ring is a contiguous arc whose starting angle
//!   depends on the seed.
//! - `BLOCK_WISE` unions random rectangles (area at least `0.0816·P`, aspect ratio log-uniform
//!   in `[0.3, 1/0.3]`) until the quota is met. The last rectangle is filled only partially.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::ImageTensor;
use crate::nn::kernels::adaptive_bin;
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskingMethod {
    Random,
    Square,
    BlockWise,
}

impl MaskingMethod {
    pub const ALL: [MaskingMethod; 3] = [MaskingMethod::Random, MaskingMethod::Square, MaskingMethod::BlockWise];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "RANDOM",
            Self::Square => "SQUARE",
            Self::BlockWise => "BLOCK_WISE",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for MaskingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm || m.name().replace('_', "") == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown masking method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    patch_size: usize,
    grid_h: usize,
    grid_w: usize,
    grid: Vec<bool>,
    ratio: f64,
    requested_ratio: f64,
    method: MaskingMethod,
    seed: u64,
}

const MAGIC: &[u8; 8] = b"MDCPTMSK";
const FORMAT_VERSION: u32 = 1;

impl MaskMap {
    /// Build from an explicit grid (row-major, `true` = kept).
    pub fn from_grid(patch_size: usize, grid_h: usize, grid_w: usize, grid: Vec<bool>) -> Result<Self> {
        if patch_size == 0 || grid_h == 0 || grid_w == 0 || grid.len() != grid_h * grid_w {
            return Err(Error::InvalidShape(format!(
                "grid of {} cells does not match {grid_h}×{grid_w} (patch {patch_size})",
                grid.len()
            )));
        }
        let masked = grid.iter().filter(|k| !**k).count();
        let ratio = masked as f64 / grid.len() as f64;
        Ok(Self {
            patch_size,
            grid_h,
            grid_w,
            grid,
            ratio,
            requested_ratio: ratio,
            method: MaskingMethod::Random,
            seed: 0,
        })
    }

    pub fn all_kept(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        generate_mask(height, width, patch_size, 0.0, MaskingMethod::Random, 0)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Image dimensions `(H, W)` the mask applies to.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid_h * self.patch_size, self.grid_w * self.patch_size)
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn is_kept(&self, gy: usize, gx: usize) -> bool {
        self.grid[gy * self.grid_w + gx]
    }

    pub fn num_patches(&self) -> usize {
        self.grid.len()
    }

    pub fn num_masked(&self) -> usize {
        self.grid.iter().filter(|k| !**k).count()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn requested_ratio(&self) -> f64 {
        self.requested_ratio
    }

    pub fn method(&self) -> MaskingMethod {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pixel_kept(&self, y: usize, x: usize) -> bool {
        self.is_kept(y / self.patch_size, x / self.patch_size)
    }

    /// Kept map at `oh × ow`: a site is kept iff every image pixel in its adaptive bin is kept.
    /// At image resolution this is the pixel map itself.
    pub fn kept_map_at(&self, oh: usize, ow: usize) -> Vec<f32> {
        let (h, w) = self.image_dims();
        let mut out = vec![0.0f32; oh * ow];
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, w, ow);
                let gy = y0 / self.patch_size..=(y1 - 1) / self.patch_size;
                let kept = gy.clone().all(|gy| {
                    (x0 / self.patch_size..=(x1 - 1) / self.patch_size).all(|gx| self.is_kept(gy, gx))
                });
                out[i * ow + j] = if kept { 1.0 } else { 0.0 };
            }
        }
        out
    }

    /// Number of 4-neighbour patch pairs with one kept and one masked patch.
    pub fn boundary_edges(&self) -> usize {
        let mut n = 0;
        for y in 0..self.grid_h {
            for x in 0..self.grid_w {
                let k = self.is_kept(y, x);
                if x + 1 < self.grid_w && k != self.is_kept(y, x + 1) {
                    n += 1;
                }
                if y + 1 < self.grid_h && k != self.is_kept(y + 1, x) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Header (patch, H, W, requested ratio, method, seed) followed by a kept-bit set, LSB first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = self.image_dims();
        let mut out = Vec::with_capacity(48 + self.grid.len() / 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.patch_size, h, w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.requested_ratio.to_le_bytes());
        out.push(self.method.code());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let mut bits = vec![0u8; self.grid.len().div_ceil(8)];
        for (i, k) in self.grid.iter().enumerate() {
            if *k {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("mask file: {m}"));
        if bytes.len() < 41 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(8) as u32 != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let (patch, h, w) = (u32_at(12), u32_at(16), u32_at(20));
        let requested_ratio = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let method = MaskingMethod::from_code(bytes[32]).ok_or_else(|| bad("unknown method"))?;
        let seed = u64::from_le_bytes(bytes[33..41].try_into().unwrap());
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(bad("inconsistent dimensions"));
        }
        let (gh, gw) = (h / patch, w / patch);
        let bits = &bytes[41..];
        if bits.len() != (gh * gw).div_ceil(8) {
            return Err(bad("truncated bit set"));
        }
        let grid = (0..gh * gw).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let mut m = Self::from_grid(patch, gh, gw, grid)?;
        m.requested_ratio = requested_ratio;
        m.method = method;
        m.seed = seed;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

/// Generate a mask masking exactly `round(ratio · P)` patches.
pub fn generate_mask(
    height: usize,
    width: usize,
    patch_size: usize,
    ratio: f64,
    method: MaskingMethod,
    seed: u64,
) -> Result<MaskMap> {
    if patch_size == 0 || height == 0 || width == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
        return Err(Error::InvalidShape(format!(
            "{height}×{width} is not divisible into {patch_size}×{patch_size} patches"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let (gh, gw) = (height / patch_size, width / patch_size);
    let p = gh * gw;
    let n_mask = ((ratio * p as f64).round() as usize).min(p);
    let mut rng = rng_from(seed);
    let masked: Vec<usize> = match method {
        _ if n_mask == 0 => Vec::new(),
        MaskingMethod::Random => rand::seq::index::sample(&mut rng, p, n_mask).into_vec(),
        MaskingMethod::Square => square_cells(gh, gw, n_mask, &mut rng),
        MaskingMethod::BlockWise => block_cells(gh, gw, n_mask, &mut rng),
    };
    let mut grid = vec![true; p];
    for i in masked {
        grid[i] = false;
    }
    let mut m = MaskMap::from_grid(patch_size, gh, gw, grid)?;
    debug_assert_eq!(m.num_masked(), n_mask);
    m.requested_ratio = ratio;
    m.method = method;
    m.seed = seed;
    Ok(m)
}

fn square_cells(gh: usize, gw: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let (cy, cx) = ((gh as f64 - 1.0) / 2.0, (gw as f64 - 1.0) / 2.0);
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    let mut cells: Vec<(f64, f64, usize)> = (0..gh * gw)
        .map(|i| {
            let (dy, dx) = ((i / gw) as f64 - cy, (i % gw) as f64 - cx);
            let ring = dy.abs().max(dx.abs());
            let angle = (dy.atan2(dx) - offset).rem_euclid(std::f64::consts::TAU);
            (ring, angle, i)
        })
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    cells.into_iter().take(n).map(|c| c.2).collect()
}

fn block_cells(gh: usize, gw: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let p = gh * gw;
    let min_area = ((0.0816 * p as f64).round() as usize).max(1);
    let log_aspect = (0.3f64).ln()..=(1.0 / 0.3f64).ln();
    let mut kept = vec![true; p];
    let mut out = Vec::with_capacity(n);
    let mut failures = 0;
    while out.len() < n {
        let remaining = n - out.len();
        if failures >= 100 {
            out.extend((0..p).filter(|i| kept[*i]).take(remaining));
            break;
        }
        let area = rng.random_range(min_area as f64..=min_area.max(remaining) as f64);
        let aspect = rng.random_range(log_aspect.clone()).exp();
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, gh);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, gw);
        let top = rng.random_range(0..=gh - bh);
        let left = rng.random_range(0..=gw - bw);
        let before = out.len();
        'fill: for y in top..top + bh {
            for x in left..left + bw {
                let i = y * gw + x;
                if kept[i] {
                    kept[i] = false;
                    out.push(i);
                    if out.len() == n {
                        break 'fill;
                    }
                }
            }
        }
        failures = if out.len() == before { failures + 1 } else { 0 };
    }
    out
}

/// Zero-fill masked patches.
pub fn apply_mask(x: &ImageTensor, m: &MaskMap) -> Result<ImageTensor> {
    apply_mask_with_fill(x, m, 0.0)
}

pub fn apply_mask_with_fill(x: &ImageTensor, m: &MaskMap, fill: f32) -> Result<ImageTensor> {
    let (h, w) = m.image_dims();
    if x.height() != h || x.width() != w {
        return Err(Error::InvalidShape(format!(
            "mask covers {h}×{w} but the image is {}×{}",
            x.height(),
            x.width()
        )));
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        let plane = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                if !m.pixel_kept(y, xx) {
                    plane[y * w + xx] = fill;
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of masked patches.
pub fn mask_ratio_of(m: &MaskMap) -> f64 {
    m.num_masked() as f64 / m.num_patches() as f64
}
