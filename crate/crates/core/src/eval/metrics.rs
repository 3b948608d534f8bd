use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::InvalidShape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n)
}

/// `10·log10(range² / MSE)` in dB; `f64::INFINITY` when the images are equal.
pub fn psnr(x_hat: &ImageTensor, gt: &ImageTensor, data_range: f64) -> Result<f64> {
    let m = mse(x_hat, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian-window (σ = 1.5) positions and channels, data range 1.
pub fn ssim(x_hat: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check(x_hat, gt)?;
    let (h, w, c) = gt.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let a: Vec<f64> = x_hat.plane(ch).iter().map(|v| *v as f64).collect();
        let b: Vec<f64> = gt.plane(ch).iter().map(|v| *v as f64).collect();
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect() };
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
        let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
        let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::zeros(4, 4, 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = ImageTensor::filled(4, 4, 3, 0.5);
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let c = ImageTensor::filled(4, 4, 3, 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_examples() {
        let x = ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y * 5 + x * 3 + c) % 9) as f32 / 8.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let (a, b) = (ImageTensor::filled(12, 12, 1, 0.2), ImageTensor::filled(12, 12, 1, 0.4));
        let want = (2.0 * 0.2 * 0.4 + SSIM_C1) / (0.04 + 0.16 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-6);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.5);
        assert!(ssim(&ImageTensor::zeros(8, 8, 1), &ImageTensor::zeros(8, 8, 1)).is_err());
    }
}
