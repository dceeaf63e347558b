//! Segmentation losses on predicted probabilities, each returning its value
//! and gradient with respect to the probabilities.
//!
//! Probabilities are clamped to `[1e-7, 1 − 1e-7]` before any logarithm; the
//! gradient of a logarithmic term is zero for entries that were clamped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bce: f32,
    pub lambda_dice: f32,
    pub lambda_focal: f32,
    pub focal_gamma: f32,
    pub focal_alpha: f32,
    pub dice_smooth: f32,
    /// Upper clamp for the per-batch positive-class weight.
    pub pos_weight_cap: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_bce: 0.4,
            lambda_dice: 0.3,
            lambda_focal: 0.3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            pos_weight_cap: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 || self.lambda_focal < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        if self.pos_weight_cap < 1.0 {
            return Err(Error::Config("pos_weight_cap must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    /// `∂loss/∂probs`.
    pub grad: Tensor,
}

#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub focal: f64,
    pub pos_weight: f32,
    pub grad: Tensor,
}

fn check(op: &'static str, probs: &Tensor, target: &Tensor) -> Result<()> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(
            op,
            format!("probs {:?} vs target {:?}", probs.shape(), target.shape()),
        ));
    }
    if probs.is_empty() {
        return Err(Error::shape(op, "empty input"));
    }
    Ok(())
}

/// Clamped probability and whether the clamp was inactive.
#[inline]
fn clamp(p: f32) -> (f64, bool) {
    let p = p as f64;
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// `#negative / #positive` over the batch, clamped to `[1, cap]`. Pixels with
/// target > 0.5 count as positive.
pub fn batch_pos_weight(target: &Tensor, cap: f32) -> f32 {
    let pos = target.data().iter().filter(|&&y| y > 0.5).count();
    let neg = target.len() - pos;
    if pos == 0 {
        return cap;
    }
    (neg as f32 / pos as f32).clamp(1.0, cap)
}

/// Mean of `−[w·y·ln p + (1 − y)·ln(1 − p)]`.
pub fn bce_weighted(probs: &Tensor, target: &Tensor, pos_weight: f32) -> Result<LossValue> {
    check("bce_weighted", probs, target)?;
    let n = probs.len() as f64;
    let w = pos_weight as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&pr, &yr) in probs.data().iter().zip(target.data()) {
        let (p, live) = clamp(pr);
        let y = yr as f64;
        total -= w * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        let g = if live {
            (-w * y / p + (1.0 - y) / (1.0 - p)) / n
        } else {
            0.0
        };
        grad.push(g as f32);
    }
    Ok(LossValue {
        value: total / n,
        grad: Tensor::from_vec(probs.shape(), grad)?,
    })
}

/// Soft Dice over the whole tensor: `1 − (2Σpy + s)/(Σp + Σy + s)`. No
/// logarithm is involved, so the probabilities are used unclamped.
pub fn dice_loss(probs: &Tensor, target: &Tensor, smooth: f32) -> Result<LossValue> {
    check("dice_loss", probs, target)?;
    let s = smooth as f64;
    let (mut spy, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for (&pr, &yr) in probs.data().iter().zip(target.data()) {
        let (p, y) = (pr as f64, yr as f64);
        spy += p * y;
        sp += p;
        sy += y;
    }
    let num = 2.0 * spy + s;
    let den = sp + sy + s;
    let grad = target
        .data()
        .iter()
        .map(|&yr| (-(2.0 * yr as f64 * den - num) / (den * den)) as f32)
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad: Tensor::from_vec(probs.shape(), grad)?,
    })
}

/// Mean of `−α·y·(1−p)^γ·ln p − (1−α)·(1−y)·p^γ·ln(1−p)`.
pub fn focal_loss(probs: &Tensor, target: &Tensor, gamma: f32, alpha: f32) -> Result<LossValue> {
    check("focal_loss", probs, target)?;
    let n = probs.len() as f64;
    let (g, a) = (gamma as f64, alpha as f64);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&pr, &yr) in probs.data().iter().zip(target.data()) {
        let (p, live) = clamp(pr);
        let y = yr as f64;
        let q = 1.0 - p;
        let (lp, lq) = (p.ln(), q.ln());
        total += -a * y * q.powf(g) * lp - (1.0 - a) * (1.0 - y) * p.powf(g) * lq;
        let d = if live {
            let pos = -g * q.powf(g - 1.0) * lp + q.powf(g) / p;
            let neg = g * p.powf(g - 1.0) * lq - p.powf(g) / q;
            (-a * y * pos - (1.0 - a) * (1.0 - y) * neg) / n
        } else {
            0.0
        };
        grad.push(d as f32);
    }
    Ok(LossValue {
        value: total / n,
        grad: Tensor::from_vec(probs.shape(), grad)?,
    })
}

/// `λ_bce·BCE + λ_dice·Dice + λ_focal·Focal` with the positive weight taken
/// from the batch via [`batch_pos_weight`].
pub fn composite_loss(probs: &Tensor, target: &Tensor, w: &LossWeights) -> Result<CompositeLoss> {
    let pos_weight = batch_pos_weight(target, w.pos_weight_cap);
    composite_loss_with(probs, target, w, pos_weight)
}

pub fn composite_loss_with(
    probs: &Tensor,
    target: &Tensor,
    w: &LossWeights,
    pos_weight: f32,
) -> Result<CompositeLoss> {
    let bce = bce_weighted(probs, target, pos_weight)?;
    let dice = dice_loss(probs, target, w.dice_smooth)?;
    let focal = focal_loss(probs, target, w.focal_gamma, w.focal_alpha)?;
    let (lb, ld, lf) = (w.lambda_bce as f64, w.lambda_dice as f64, w.lambda_focal as f64);
    let grad: Vec<f32> = (0..probs.len())
        .map(|i| {
            (lb * bce.grad.data()[i] as f64
                + ld * dice.grad.data()[i] as f64
                + lf * focal.grad.data()[i] as f64) as f32
        })
        .collect();
    Ok(CompositeLoss {
        total: lb * bce.value + ld * dice.value + lf * focal.value,
        bce: bce.value,
        dice: dice.value,
        focal: focal.value,
        pos_weight,
        grad: Tensor::from_vec(probs.shape(), grad)?,
    })
}
