//! Scalar segmentation losses with exact gradients w.r.t. the prediction.
//!
//! Overlap losses pool their soft counts over the whole batch:
//! `TP = Σ p·t`, `FN = Σ (1−p)·t`, `FP = Σ p·(1−t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;

/// `alpha` weighs false negatives, `beta` weighs false positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TverskyParams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_smooth")]
    pub smooth: f64,
}

fn default_alpha() -> f64 {
    0.3
}
fn default_beta() -> f64 {
    0.7
}
fn default_smooth() -> f64 {
    1.0
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams { alpha: 0.3, beta: 0.7, smooth: 1.0 }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 || self.smooth <= 0.0 {
            return Err(Error::InvalidConfig(format!("invalid Tversky parameters {self:?}")));
        }
        Ok(())
    }
}

/// Loss selected by the `"kind"` config key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossKind {
    Bce,
    Dice {
        #[serde(default = "default_smooth")]
        smooth: f64,
    },
    Tversky {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_smooth")]
        smooth: f64,
    },
}

impl LossKind {
    pub fn evaluate<T: Scalar>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        match *self {
            LossKind::Bce => bce_loss(pred, target),
            LossKind::Dice { smooth } => dice_loss(pred, target, smooth),
            LossKind::Tversky { alpha, beta, smooth } => {
                tversky_loss(pred, target, &TverskyParams { alpha, beta, smooth })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Bce => Ok(()),
            LossKind::Dice { smooth } if smooth > 0.0 => Ok(()),
            LossKind::Dice { smooth } => Err(Error::InvalidConfig(format!("dice smooth must be > 0, got {smooth}"))),
            LossKind::Tversky { alpha, beta, smooth } => TverskyParams { alpha, beta, smooth }.validate(),
        }
    }
}

fn check<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!(
            "prediction {} vs target {}",
            pred.shape, target.shape
        )));
    }
    Ok(())
}

fn grad_tensor<T: Scalar>(pred: &Tensor<T>, g: impl Iterator<Item = f64>) -> Tensor<T> {
    Tensor {
        shape: pred.shape,
        values: g.map(T::of).collect(),
        grad: None,
    }
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check(pred, target)?;
    let n = pred.values.len().max(1) as f64;
    let mut loss = 0f64;
    let grads: Vec<f64> = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| {
            let raw = p.f64();
            let p = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = t.f64();
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            if raw < BCE_CLAMP || raw > 1.0 - BCE_CLAMP {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            }
        })
        .collect();
    Ok((loss / n, grad_tensor(pred, grads.into_iter())))
}

/// Pooled soft counts `(TP, FN, FP)`.
pub fn soft_counts<T: Scalar>(pred: &[T], target: &[T]) -> (f64, f64, f64) {
    let (mut tp, mut fn_, mut fp) = (0f64, 0f64, 0f64);
    for (p, t) in pred.iter().zip(target) {
        let (p, t) = (p.f64(), t.f64());
        tp += p * t;
        fn_ += (1.0 - p) * t;
        fp += p * (1.0 - t);
    }
    (tp, fn_, fp)
}

/// Negated Tversky coefficient `−(TP + s)/(TP + α·FN + β·FP + s)`.
pub fn tversky_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, p: &TverskyParams) -> Result<(f64, Tensor<T>)> {
    check(pred, target)?;
    let (tp, fn_, fp) = soft_counts(&pred.values, &target.values);
    let num = tp + p.smooth;
    let den = tp + p.alpha * fn_ + p.beta * fp + p.smooth;
    let coeff = num / den;
    // d(num)/dp_i = t_i ; d(den)/dp_i = t_i − α·t_i + β·(1 − t_i)
    let g = target.values.iter().map(|t| {
        let t = t.f64();
        let dden = t - p.alpha * t + p.beta * (1.0 - t);
        -(t * den - num * dden) / (den * den)
    });
    Ok((-coeff, grad_tensor(pred, g)))
}

/// Negated soft Dice `−(2·TP + s)/(2·TP + FP + FN + s)`.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<(f64, Tensor<T>)> {
    check(pred, target)?;
    let (tp, fn_, fp) = soft_counts(&pred.values, &target.values);
    let num = 2.0 * tp + smooth;
    let den = 2.0 * tp + fp + fn_ + smooth;
    // 2TP + FP + FN = Σp + Σt, so d(den)/dp_i = 1
    let g = target.values.iter().map(|t| {
        let t = t.f64();
        -(2.0 * t * den - num) / (den * den)
    });
    Ok((-num / den, grad_tensor(pred, g)))
}
