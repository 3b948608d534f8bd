//! Procedural clean images so corpora can be built without any downloads.

use rand::Rng;

use crate::image::ImageTensor;
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Checkerboard,
    Gradient,
    ValueNoise,
    Stripes,
    Discs,
}

impl TextureKind {
    pub const ALL: [TextureKind; 5] = [
        TextureKind::Checkerboard,
        TextureKind::Gradient,
        TextureKind::ValueNoise,
        TextureKind::Stripes,
        TextureKind::Discs,
    ];
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`.
fn value_noise(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    let mut cells = rng.random_range(2..5usize);
    for _ in 0..4 {
        let g = cells + 1;
        let lattice: Vec<f32> = (0..g * g).map(|_| rng.random::<f32>()).collect();
        for y in 0..h {
            let fy = y as f32 / h as f32 * cells as f32;
            let (iy, ty) = (fy as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f32 / w as f32 * cells as f32;
                let (ix, tx) = (fx as usize, smooth(fx.fract()));
                let at = |yy: usize, xx: usize| lattice[yy * g + xx];
                let top = at(iy, ix) + (at(iy, ix + 1) - at(iy, ix)) * tx;
                let bot = at(iy + 1, ix) + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * tx;
                out[y * w + x] += amp * (top + (bot - top) * ty);
            }
        }
        total += amp;
        amp *= 0.5;
        cells *= 2;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// A deterministic RGB texture of the given kind.
pub fn texture(kind: TextureKind, height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = rng_from(seed);
    let (a, b) = (color(&mut rng), color(&mut rng));
    let (h, w) = (height, width);
    let field: Vec<f32> = match kind {
        TextureKind::Checkerboard => {
            let cell = rng.random_range(3..=(h.min(w) / 3).max(4));
            (0..h * w).map(|i| (((i / w) / cell + (i % w) / cell) % 2) as f32).collect()
        }
        TextureKind::Gradient => {
            let (s, c) = rng.random_range(0.0..std::f32::consts::TAU).sin_cos();
            let raw: Vec<f32> = (0..h * w).map(|i| (i / w) as f32 * s + (i % w) as f32 * c).collect();
            let (lo, hi) = raw.iter().fold((f32::MAX, f32::MIN), |(l, u), v| (l.min(*v), u.max(*v)));
            raw.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }).collect()
        }
        TextureKind::ValueNoise => value_noise(h, w, &mut rng),
        TextureKind::Stripes => {
            let (s, c) = rng.random_range(0.0..std::f32::consts::PI).sin_cos();
            let period = rng.random_range(4.0..(h.min(w) as f32 / 2.0).max(5.0));
            (0..h * w)
                .map(|i| {
                    let p = ((i / w) as f32 * s + (i % w) as f32 * c) / period;
                    0.5 + 0.5 * (p * std::f32::consts::TAU).sin()
                })
                .collect()
        }
        TextureKind::Discs => {
            let mut f = value_noise(h, w, &mut rng).iter().map(|v| 0.3 * v).collect::<Vec<_>>();
            for _ in 0..rng.random_range(3..9) {
                let cy = rng.random_range(0.0..h as f32);
                let cx = rng.random_range(0.0..w as f32);
                let r = rng.random_range(2.0..(h.min(w) as f32 / 3.0).max(3.0));
                let level: f32 = rng.random_range(0.4..1.0);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        if d2 <= r * r {
                            f[y * w + x] = level;
                        }
                    }
                }
            }
            f
        }
    };
    let detail = value_noise(h, w, &mut rng);
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        let t = field[y * w + x];
        let base = mix(a, b, t)[c];
        (base * (0.85 + 0.3 * detail[y * w + x])).clamp(0.0, 1.0)
    })
}

/// Texture number `index` of a procedural clean set: kinds cycle, each with its own seed.
pub fn procedural_image(index: usize, height: usize, width: usize, seed: u64) -> ImageTensor {
    let kind = TextureKind::ALL[index % TextureKind::ALL.len()];
    texture(kind, height, width, crate::seed::derive_seed(seed, &[0x7e47, index as u64]))
}
