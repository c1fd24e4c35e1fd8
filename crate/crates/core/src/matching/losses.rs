//! Scalar loss terms: sigmoid focal, L1, generalized IoU, dice.

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, BoxXyxy, SoftMask};

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Positive-target focal term `α(1−p)^γ·(−log p)`.
#[inline]
pub fn focal_pos(logit: f64, fp: FocalParams) -> f64 {
    let p = sigmoid(logit);
    fp.alpha * (1.0 - p).powf(fp.gamma) * softplus(-logit)
}

/// Negative-target focal term `(1−α)p^γ·(−log(1−p))`.
#[inline]
pub fn focal_neg(logit: f64, fp: FocalParams) -> f64 {
    let p = sigmoid(logit);
    (1.0 - fp.alpha) * p.powf(fp.gamma) * softplus(logit)
}

pub fn sigmoid_focal_loss(logit: f64, target: bool, fp: FocalParams) -> f64 {
    if target {
        focal_pos(logit, fp)
    } else {
        focal_neg(logit, fp)
    }
}

/// `Σ|aᵢ − bᵢ|`.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Generalized IoU and whether both boxes were degenerate (then the value is 0).
pub fn giou_flagged(a: &BoxXyxy, b: &BoxXyxy) -> (f64, bool) {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 && area_b <= 0.0 {
        return (0.0, true);
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    (inter / union - (enclosing - union) / enclosing, false)
}

/// `IoU − (C − U)/C`, in `[−1, 1]`.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let (g, degenerate) = giou_flagged(a, b);
    if degenerate {
        log::debug!("giou of two degenerate boxes {a:?}, {b:?} defined as 0");
    }
    g
}

pub fn giou_loss(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    1.0 - giou(a, b)
}

pub const DICE_EPS: f64 = 1.0;

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` over raw values.
pub fn dice_loss_values(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dims(gt.len(), pred.len()));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

pub fn dice_loss(pred: &SoftMask, gt: &BinaryMask) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::dims(
            format!("{}x{}", gt.width(), gt.height()),
            format!("{}x{}", pred.width(), pred.height()),
        ));
    }
    let g: Vec<f64> = gt.bits().iter().map(|&b| b as f64).collect();
    dice_loss_values(pred.values(), &g)
}
