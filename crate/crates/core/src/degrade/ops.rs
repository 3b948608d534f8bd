use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed::rng_from;

fn invalid<T>(msg: String) -> Result<T> {
    Err(Error::InvalidParameter(msg))
}

/// Add i.i.d. Gaussian noise with std `sigma / 255` and clip.
pub fn apply_gaussian_noise(gt: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma must be positive, got {sigma}"));
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive std");
    let mut rng = rng_from(seed);
    let mut out = gt.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Normalized `len × len` line kernel through the center at `angle_deg` (0 = horizontal),
/// row-major. Each of the `len` samples along the line lands on its nearest cell.
pub fn motion_kernel(len: usize, angle_deg: f64) -> Result<Vec<f64>> {
    if !(3..=31).contains(&len) || len.is_multiple_of(2) {
        return invalid(format!("kernel_length must be odd in [3, 31], got {len}"));
    }
    if !angle_deg.is_finite() {
        return invalid("angle_deg is not finite".into());
    }
    let r = (len / 2) as f64;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut k = vec![0.0f64; len * len];
    for t in 0..len {
        let d = t as f64 - r;
        let x = (r + d * c).round() as usize;
        let y = (r - d * s).round() as usize;
        k[y.min(len - 1) * len + x.min(len - 1)] += 1.0;
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Convolve with [`motion_kernel`] using reflect padding.
pub fn apply_motion_blur(gt: &ImageTensor, kernel_length: usize, angle_deg: f64) -> Result<ImageTensor> {
    let k = motion_kernel(kernel_length, angle_deg)?;
    let (h, w, ch) = gt.shape();
    let r = (kernel_length / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = k
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| ((i / kernel_length) as isize - r, (i % kernel_length) as isize - r, *v))
        .collect();
    let mut out = ImageTensor::zeros(h, w, ch);
    for c in 0..ch {
        let src = gt.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, kv) in &taps {
                    let sy = reflect(y as isize + dy, h);
                    let sx = reflect(x as isize + dx, w);
                    acc += kv * src[sy * w + sx] as f64;
                }
                dst[y * w + x] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Atmospheric scattering over a vertical linear depth ramp (depth 1 on the top row, 0 on the bottom).
pub fn apply_haze(gt: &ImageTensor, beta: f64, airlight: f64) -> Result<ImageTensor> {
    if !(beta > 0.0 && beta.is_finite()) {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    if !(0.7..=1.0).contains(&airlight) {
        return invalid(format!("airlight must lie in [0.7, 1], got {airlight}"));
    }
    let (h, w, ch) = gt.shape();
    let mut out = gt.clone();
    for y in 0..h {
        let d = if h == 1 { 1.0 } else { 1.0 - y as f64 / (h - 1) as f64 };
        let t = (-beta * d).exp();
        for c in 0..ch {
            for v in &mut out.plane_mut(c)[y * w..(y + 1) * w] {
                *v = (*v as f64 * t + airlight * (1.0 - t)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Additive bright streaks. Streaks are drawn until the touched pixel fraction reaches `streak_density`.
pub fn apply_rain_streaks(gt: &ImageTensor, streak_density: f64, angle_deg: f64, seed: u64) -> Result<ImageTensor> {
    if !(streak_density > 0.0 && streak_density <= 0.2) {
        return invalid(format!("streak_density must lie in (0, 0.2], got {streak_density}"));
    }
    if !angle_deg.is_finite() {
        return invalid("angle_deg is not finite".into());
    }
    let (h, w, ch) = gt.shape();
    let n = h * w;
    let target = ((streak_density * n as f64).round() as usize).max(1);
    let len = (h.min(w) / 4).max(3);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut rng = rng_from(seed);
    let mut layer = vec![0.0f32; n];
    let mut touched = 0usize;
    let mut attempts = 0usize;
    while touched < target && attempts < 64 * target + 64 {
        attempts += 1;
        let y0 = rng.random_range(0.0..h as f64);
        let x0 = rng.random_range(0.0..w as f64);
        let intensity: f32 = rng.random_range(0.25..0.5);
        for t in 0..len {
            let y = (y0 + t as f64 * c).floor();
            let x = (x0 + t as f64 * s).floor();
            if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                continue;
            }
            let i = y as usize * w + x as usize;
            if layer[i] == 0.0 {
                touched += 1;
            }
            layer[i] += intensity;
        }
    }
    let mut out = gt.clone();
    for k in 0..ch {
        for (v, l) in out.plane_mut(k).iter_mut().zip(&layer) {
            *v = (*v + l).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Gamma darkening `scale·gt^gamma` plus Gaussian read noise, clipped.
pub fn apply_low_light(
    gt: &ImageTensor,
    gamma: f64,
    scale: f64,
    read_noise_sigma: f64,
    seed: u64,
) -> Result<ImageTensor> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return invalid(format!("gamma must be ≥ 1, got {gamma}"));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return invalid(format!("scale must lie in (0, 1], got {scale}"));
    }
    if !(read_noise_sigma >= 0.0 && read_noise_sigma.is_finite()) {
        return invalid(format!("read_noise_sigma must be ≥ 0, got {read_noise_sigma}"));
    }
    let mut out = gt.clone();
    let noise = (read_noise_sigma > 0.0).then(|| Normal::new(0.0, read_noise_sigma).expect("positive std"));
    let mut rng = rng_from(seed);
    for v in out.data_mut() {
        let mut y = scale * (*v as f64).powf(gamma);
        if let Some(n) = &noise {
            y += n.sample(&mut rng);
        }
        *v = y.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f32) -> ImageTensor {
        ImageTensor::filled(h, w, 3, v)
    }

    #[test]
    fn noise_statistics() {
        let gt = gray(64, 64, 0.5);
        let out = apply_gaussian_noise(&gt, 25.0, 11).unwrap();
        let n = out.data().len() as f64;
        let mean = out.mean();
        let sd = 25.0 / 255.0;
        assert!((mean - 0.5).abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
        let var = out.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - sd).abs() < 0.05 * sd);
        assert_eq!(out, apply_gaussian_noise(&gt, 25.0, 11).unwrap());
        assert!(apply_gaussian_noise(&gt, 0.0, 11).is_err());
    }

    #[test]
    fn motion_kernel_normalized() {
        for len in (3..=31).step_by(2) {
            for a in [0.0, 17.0, 45.0, 90.0, 133.0, 180.0, 271.5] {
                let s: f64 = motion_kernel(len, a).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert!(motion_kernel(4, 0.0).is_err());
        assert!(motion_kernel(33, 0.0).is_err());
    }

    #[test]
    fn blur_of_constant_and_impulse() {
        let c = gray(9, 9, 0.3);
        let out = apply_motion_blur(&c, 3, 0.0).unwrap();
        for v in out.data() {
            assert!((v - 0.3).abs() < 1e-6);
        }
        let mut imp = ImageTensor::zeros(11, 11, 1);
        imp.set(5, 5, 0, 1.0);
        let out = apply_motion_blur(&imp, 5, 0.0).unwrap();
        let lit: Vec<(usize, usize)> = (0..11)
            .flat_map(|y| (0..11).map(move |x| (y, x)))
            .filter(|&(y, x)| out.get(y, x, 0) != 0.0)
            .collect();
        assert_eq!(lit, (3..8).map(|x| (5, x)).collect::<Vec<_>>());
        for (y, x) in lit {
            assert!((out.get(y, x, 0) - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn haze_limits_and_closed_form() {
        let gt = ImageTensor::from_fn(8, 8, 3, |y, x, c| ((y * 8 + x) as f32 / 64.0 + c as f32 * 0.1).min(1.0));
        let thin = apply_haze(&gt, 1e-9, 0.9).unwrap();
        for (a, b) in thin.data().iter().zip(gt.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let thick = apply_haze(&gt, 50.0, 0.9).unwrap();
        for c in 0..3 {
            for x in 0..8 {
                assert!((thick.get(0, x, c) - 0.9).abs() < 1e-6);
            }
        }
        let black = apply_haze(&ImageTensor::zeros(4, 4, 3), 1.0, 0.9).unwrap();
        let want = 0.9 * (1.0 - (-1.0f64).exp());
        assert!((black.get(0, 2, 1) as f64 - want).abs() < 1e-6);
        assert!(apply_haze(&gt, 1.0, 0.5).is_err());
    }

    #[test]
    fn rain_is_additive_with_matching_coverage() {
        let gt = gray(64, 64, 0.5);
        for (seed, density) in [(1u64, 0.05), (2, 0.1), (3, 0.2)] {
            let out = apply_rain_streaks(&gt, density, 10.0, seed).unwrap();
            assert!(out.data().iter().zip(gt.data()).all(|(o, g)| o >= g));
            let frac = out.plane(0).iter().filter(|v| **v > 0.6).count() as f64 / (64.0 * 64.0);
            assert!((frac - density).abs() <= 0.5 * density, "density {density} frac {frac}");
            assert!(out.mean() >= gt.mean());
        }
        assert!(apply_rain_streaks(&gt, 0.0, 0.0, 0).is_err());
        assert!(apply_rain_streaks(&gt, 0.25, 0.0, 0).is_err());
    }

    #[test]
    fn low_light_closed_forms() {
        let out = apply_low_light(&gray(4, 4, 1.0), 2.0, 0.3, 0.0, 0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-7));
        let out = apply_low_light(&gray(4, 4, 0.5), 2.0, 0.4, 0.0, 0).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.1f32));
        let out = apply_low_light(&ImageTensor::zeros(4, 4, 3), 2.0, 0.4, 0.02, 5).unwrap();
        assert!(out.data().iter().all(|v| *v >= 0.0));
        assert!(apply_low_light(&gray(2, 2, 0.5), 0.5, 0.4, 0.0, 0).is_err());
        assert!(apply_low_light(&gray(2, 2, 0.5), 2.0, 1.5, 0.0, 0).is_err());
    }
}
