//! Focal classification loss, L1 pixel loss and their weighted sum.
//!
//! Everything is evaluated in `f64` and returns analytic gradients alongside the value so
//! the training step can seed backpropagation directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pix: f64,
    pub cls: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(pix: f64, cls: f64, alpha: f64) -> Self {
        Self { pix, cls, total: alpha * pix + cls, alpha }
    }

    pub fn is_finite(&self) -> bool {
        self.pix.is_finite() && self.cls.is_finite() && self.total.is_finite()
    }
}

fn log_softmax<T: Copy + Into<f64>>(logits: &[T]) -> Result<Vec<f64>> {
    let z: Vec<f64> = logits.iter().map(|v| (*v).into()).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

fn check_target(n: usize, target: usize, gamma: f64, weights: Option<&[f64]>) -> Result<f64> {
    if n == 0 || target >= n {
        return Err(Error::InvalidInput(format!("target {target} out of range for {n} classes")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be ≥ 0, got {gamma}")));
    }
    match weights {
        None => Ok(1.0),
        Some(w) if w.len() == n && w.iter().all(|v| v.is_finite() && *v >= 0.0) => Ok(w[target]),
        Some(w) => Err(Error::InvalidInput(format!("{} class weights for {n} classes", w.len()))),
    }
}

/// `−w_t (1 − p_t)^γ log p_t` with `p_t = softmax(logits)[target]`.
pub fn focal_loss<T: Copy + Into<f64>>(
    logits: &[T],
    target: usize,
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<f64> {
    focal_loss_with_grad(logits, target, gamma, class_weights).map(|(l, _)| l)
}

/// Focal loss and its gradient with respect to the logits.
pub fn focal_loss_with_grad<T: Copy + Into<f64>>(
    logits: &[T],
    target: usize,
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let w = check_target(logits.len(), target, gamma, class_weights)?;
    let logp = log_softmax(logits)?;
    let lp = logp[target];
    let pt = lp.exp();
    let q = -lp.exp_m1();
    let loss = -w * q.powf(gamma) * lp;
    // dL/dz_j = -w (δ_tj - p_j) [q^γ - γ q^(γ-1) p_t log p_t]
    let focus = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt * lp };
    let coef = -w * (q.powf(gamma) - focus);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(j, lpj)| coef * (if j == target { 1.0 } else { 0.0 } - lpj.exp()))
        .collect();
    Ok((loss, grad))
}

/// Mean absolute difference and its gradient (`sign(pred − gt) / N`, zero at ties).
pub fn l1_with_grad<T: Copy + Into<f64>>(pred: &[T], gt: &[T]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidShape(format!("L1 over {} vs {} elements", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = (*p).into() - (*g).into();
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mean absolute difference over every pixel and channel.
pub fn pixel_l1_loss(x_hat: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    if !x_hat.same_shape(gt) {
        return Err(Error::InvalidShape(format!("{:?} vs {:?}", x_hat.shape(), gt.shape())));
    }
    l1_with_grad(x_hat.data(), gt.data()).map(|(l, _)| l)
}

/// `alpha · L1(x̂, gt) + focal(logits, target)`.
pub fn total_loss(
    x_hat: &ImageTensor,
    gt: &ImageTensor,
    logits: &[f32],
    target: usize,
    alpha: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    let pix = pixel_l1_loss(x_hat, gt)?;
    let cls = focal_loss(logits, target, gamma, None)?;
    Ok(LossBreakdown::new(pix, cls, alpha))
}

/// Gradients of the combined objective.
#[derive(Clone, Debug)]
pub struct TotalGrad {
    pub d_recon: Vec<f64>,
    pub d_logits: Vec<f64>,
}

/// Combined objective over raw slices with gradients for both heads.
pub fn total_loss_with_grad<T: Copy + Into<f64>>(
    recon: &[T],
    gt: &[T],
    logits: &[T],
    target: usize,
    alpha: f64,
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<(LossBreakdown, TotalGrad)> {
    let (pix, mut d_recon) = l1_with_grad(recon, gt)?;
    let (cls, d_logits) = focal_loss_with_grad(logits, target, gamma, class_weights)?;
    d_recon.iter_mut().for_each(|g| *g *= alpha);
    Ok((LossBreakdown::new(pix, cls, alpha), TotalGrad { d_recon, d_logits }))
}
