//! Objective terms for the generator and discriminator.
//!
//! Probabilities are clamped to `[EPS, 1 − EPS]` inside every logarithm. The
//! `*_logit_grad` helpers give derivatives with respect to the pre-sigmoid
//! logit; they are zero wherever the clamp is active, matching the clamped
//! function exactly.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

pub const EPS: f64 = 1e-7;

fn clamp<F: Scalar>(p: F) -> F {
    p.max(F::of(EPS)).min(F::of(1.0 - EPS))
}

fn clamped<F: Scalar>(p: F) -> bool {
    p < F::of(EPS) || p > F::of(1.0 - EPS)
}

fn mean<F: Scalar>(values: impl ExactSizeIterator<Item = F>) -> F {
    let n = values.len();
    values.sum::<F>() / F::of(n as f64)
}

/// `−mean log d` over generated samples.
pub fn adv_loss_g<F: Scalar>(d_fake: &[F]) -> Result<F> {
    if d_fake.is_empty() {
        return Err(Error::Empty("d_fake batch"));
    }
    Ok(-mean(d_fake.iter().map(|&p| clamp(p).ln())))
}

/// `mean log d_fake − mean log d_real`.
pub fn adv_loss_d<F: Scalar>(d_fake: &[F], d_real: &[F]) -> Result<F> {
    if d_fake.is_empty() {
        return Err(Error::Empty("d_fake batch"));
    }
    if d_real.is_empty() {
        return Err(Error::Empty("d_real batch"));
    }
    Ok(mean(d_fake.iter().map(|&p| clamp(p).ln())) - mean(d_real.iter().map(|&p| clamp(p).ln())))
}

/// Mean absolute pixel difference.
pub fn l1_loss<F: Scalar>(y: &Array3<F>, y_hat: &Array3<F>) -> Result<F> {
    if y.dim() != y_hat.dim() {
        return Err(Error::ShapeMismatch { expected: y.shape().to_vec(), actual: y_hat.shape().to_vec() });
    }
    if y.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(y.iter().zip(y_hat.iter()).map(|(&a, &b)| (a - b).abs()).sum::<F>() / F::of(y.len() as f64))
}

/// Sum of per-slot binary cross-entropies.
pub fn rho<F: Scalar>(v_hat: &[F], target: &[F]) -> Result<F> {
    if v_hat.len() != target.len() {
        return Err(Error::LengthMismatch { expected: target.len(), actual: v_hat.len() });
    }
    Ok(v_hat
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clamp(p);
            -(t * p.ln()) - (F::one() - t) * (F::one() - p).ln()
        })
        .sum())
}

/// Batch mean of [`rho`].
pub fn cls_loss<F: Scalar>(v_hat: &[Array1<F>], targets: &[Array1<F>]) -> Result<F> {
    if v_hat.is_empty() {
        return Err(Error::Empty("classification batch"));
    }
    if v_hat.len() != targets.len() {
        return Err(Error::LengthMismatch { expected: targets.len(), actual: v_hat.len() });
    }
    let mut total = F::zero();
    for (p, t) in v_hat.iter().zip(targets) {
        total += rho(p.as_slice().expect("contiguous"), t.as_slice().expect("contiguous"))?;
    }
    Ok(total / F::of(v_hat.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Classification weight in the generator objective.
    pub lambda1: f64,
    /// L1 weight in the generator objective.
    pub lambda2: f64,
    /// Classification weight in the discriminator objective.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 10.0, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn total_g<F: Scalar>(adv: F, cls: F, l1: F, w: &LossWeights) -> F {
    adv + F::of(w.lambda1) * cls + F::of(w.lambda2) * l1
}

pub fn total_d<F: Scalar>(adv: F, cls: F, w: &LossWeights) -> F {
    adv + F::of(w.lambda3) * cls
}

/// Per-step values of every objective term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub l1: f64,
    pub cls_g: f64,
    pub cls_d: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.l1, self.cls_g, self.cls_d, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// d log(clamp(σ(z))) / dz.
pub fn log_prob_logit_grad<F: Scalar>(p: F) -> F {
    if clamped(p) {
        F::zero()
    } else {
        F::one() - p
    }
}

/// d [−t log p − (1−t) log(1−p)] / dz for one slot with p = σ(z).
pub fn bce_logit_grad<F: Scalar>(p: F, target: F) -> F {
    if clamped(p) {
        F::zero()
    } else {
        p - target
    }
}

/// d l1_loss / d ŷ, one entry per pixel.
pub fn l1_grad<F: Scalar>(y: &Array3<F>, y_hat: &Array3<F>) -> Array3<F> {
    let n = F::of(y.len() as f64);
    let mut g = y_hat - y;
    g.mapv_inplace(|d| {
        if d > F::zero() {
            F::one() / n
        } else if d < F::zero() {
            -F::one() / n
        } else {
            F::zero()
        }
    });
    g
}
