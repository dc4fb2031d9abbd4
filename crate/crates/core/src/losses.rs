//! Training objectives. Tensor functions reduce over the last dimension and
//! keep the leading ones, so one call scores a whole batch of masks or
//! distributions.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, sigmoid, softplus};
use crate::raster::Mask;

/// Weight of the focal term relative to dice in the combined mask loss.
pub const FOCAL_TO_DICE: f64 = 20.0;
pub const DICE_EPS: f64 = 1.0;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Mean over the last dimension of `−α_t (1 − p_t)^γ log p_t`.
pub fn focal_loss(logits: &Tensor, gt: &Tensor, params: FocalParams) -> Result<Tensor> {
    let ce = (softplus(logits)? - logits.mul(gt)?)?;
    let p = sigmoid(logits)?;
    let not_gt = gt.affine(-1.0, 1.0)?;
    let p_t = (p.mul(gt)? + p.affine(-1.0, 1.0)?.mul(&not_gt)?)?;
    let miss = p_t.affine(-1.0, 1.0)?;
    let modulator = if params.gamma == 2.0 {
        miss.sqr()?
    } else if params.gamma == 0.0 {
        miss.ones_like()?
    } else {
        miss.clamp(1e-12, 1.0)?.powf(params.gamma)?
    };
    let alpha_t = gt.affine(2.0 * params.alpha - 1.0, 1.0 - params.alpha)?;
    Ok(alpha_t.mul(&modulator)?.mul(&ce)?.mean(D::Minus1)?)
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` over the last dimension.
pub fn dice_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let p = sigmoid(logits)?;
    let inter = p.mul(gt)?.sum(D::Minus1)?;
    let denom = ((p.sum(D::Minus1)? + gt.sum(D::Minus1)?)? + DICE_EPS)?;
    let ratio = ((inter * 2.0)? + DICE_EPS)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

pub fn mask_total(focal: &Tensor, dice: &Tensor) -> Result<Tensor> {
    Ok(((focal * FOCAL_TO_DICE)? + dice)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target ‖ student)`.
    #[default]
    Forward,
    /// `KL(student ‖ target)`.
    Reverse,
}

/// Checks that every row of `(…, K)` values lies on the probability simplex.
pub fn check_simplex(rows: &[Vec<f32>]) -> Result<()> {
    for r in rows {
        let sum: f64 = r.iter().map(|&v| v as f64).sum();
        let min = r.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        if (sum - 1.0).abs() > SIMPLEX_TOL.max(r.len() as f64 * f32::EPSILON as f64) || min < -SIMPLEX_TOL {
            return Err(Error::OffSimplex(sum));
        }
    }
    Ok(())
}

/// KL divergence between a fixed target distribution and
/// `softmax(student_logits)`, reduced over the last dimension.
pub fn concept_kl(student_logits: &Tensor, target: &Tensor, direction: KlDirection) -> Result<Tensor> {
    if student_logits.dims() != target.dims() {
        return Err(Error::DimensionMismatch {
            expected: target.elem_count(),
            got: student_logits.elem_count(),
        });
    }
    let k = target.dim(D::Minus1)?;
    let rows = target.reshape(((), k))?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    check_simplex(&rows)?;
    let target = target.detach();
    let log_s = log_softmax(student_logits)?;
    match direction {
        KlDirection::Forward => {
            // t·log t with 0·log 0 = 0
            let log_t = target.clamp(1e-30, 1.0)?.log()?;
            let t_log_t = target.mul(&log_t)?;
            Ok((t_log_t - target.mul(&log_s)?)?.sum(D::Minus1)?)
        }
        KlDirection::Reverse => {
            let log_t = target.clamp(1e-12, 1.0)?.log()?;
            let s = log_s.exp()?;
            Ok(s.mul(&(log_s - log_t)?)?.sum(D::Minus1)?)
        }
    }
}

/// IoU of the mask thresholded at probability 0.5 (logit > 0) against `gt`.
pub fn actual_iou(logits: &[f32], gt: &Mask) -> Result<f64> {
    if logits.len() != gt.width() * gt.height() {
        return Err(Error::DimensionMismatch {
            expected: gt.width() * gt.height(),
            got: logits.len(),
        });
    }
    let pred = Mask::from_bits(gt.width(), gt.height(), logits.iter().map(|&v| v > 0.0).collect())?;
    pred.iou(gt)
}

/// Mean squared error between predicted and measured IoU.
pub fn iou_mse(iou_pred: &Tensor, actual: &Tensor) -> Result<Tensor> {
    Ok((iou_pred - actual.detach())?.sqr()?.mean(D::Minus1)?)
}

/// Mean negative log-likelihood of `targets` under `(n, V)` logits.
pub fn caption_ce(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, v) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: v });
    }
    let idx = Tensor::from_vec(targets.to_vec(), (n, 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mask: f64,
    pub iou: f64,
    pub concept: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 1.0,
            iou: 1.0,
            concept: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mask", self.mask), ("iou", self.iou), ("concept", self.concept)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("loss weight {name} = {w} must be ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice: f64,
    pub mask_total: f64,
    pub iou_mse: f64,
    pub concept_kl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caption_ce: Option<f64>,
}

impl LossBreakdown {
    pub fn new(focal: f64, dice: f64, iou_mse: f64, concept_kl: f64) -> Self {
        Self {
            focal,
            dice,
            mask_total: FOCAL_TO_DICE * focal + dice,
            iou_mse,
            concept_kl,
            caption_ce: None,
        }
    }
}

/// `w_mask·mask_total + w_iou·iou_mse + w_concept·concept_kl`.
pub fn pretrain_total(b: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.mask * b.mask_total + w.iou * b.iou_mse + w.concept * b.concept_kl)
}
