//! Plain-vector reference path for the class-specific auto-encoders.
//!
//! These functions evaluate one class auto-encoder or one feature map without
//! a graph. The batched graph head in [`super::Head`] must agree with them.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

use super::{ErrorNorm, Strategy};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// One class's linear encoder (`k×D`), tanh, and linear decoder (`D×k`).
/// There are no bias terms, so `z = 0` always reconstructs to `0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAe {
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Row-major `k×D`.
    pub encoder: Vec<f64>,
    /// Row-major `D×k`.
    pub decoder: Vec<f64>,
}

impl ClassAe {
    pub fn new(feature_dim: usize, latent_dim: usize, encoder: Vec<f64>, decoder: Vec<f64>) -> Result<Self> {
        let n = feature_dim * latent_dim;
        if n == 0 || encoder.len() != n || decoder.len() != n {
            return Err(Error::shape(
                "class_ae",
                format!(
                    "D={feature_dim}, k={latent_dim} needs {n} encoder and decoder weights, got {} and {}",
                    encoder.len(),
                    decoder.len()
                ),
            ));
        }
        Ok(ClassAe {
            feature_dim,
            latent_dim,
            encoder,
            decoder,
        })
    }

    pub fn zeros(feature_dim: usize, latent_dim: usize) -> Self {
        let n = feature_dim * latent_dim;
        ClassAe {
            feature_dim,
            latent_dim,
            encoder: vec![0.0; n],
            decoder: vec![0.0; n],
        }
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.feature_dim {
            return Err(Error::shape(
                "reconstruct",
                format!("feature of length {} given to an auto-encoder with D={}", z.len(), self.feature_dim),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "reconstruct".into(),
            });
        }
        Ok(())
    }

    /// Pre-activation latent code `encoder * z`.
    pub fn encode_linear(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(self
            .encoder
            .chunks_exact(self.feature_dim)
            .map(|row| row.iter().zip(z).map(|(w, v)| w * v).sum())
            .collect())
    }
}

pub fn reconstruct(z: &[f64], ae: &ClassAe) -> Result<Vec<f64>> {
    let latent: Vec<f64> = ae.encode_linear(z)?.into_iter().map(f64::tanh).collect();
    Ok(ae
        .decoder
        .chunks_exact(ae.latent_dim)
        .map(|row| row.iter().zip(&latent).map(|(w, h)| w * h).sum())
        .collect())
}

/// `d(z, A)`: L1 distance (MAE) or squared L2 distance (MSE) between `z` and
/// its reconstruction.
pub fn recon_error(z: &[f64], ae: &ClassAe, norm: ErrorNorm) -> Result<f64> {
    let rec = reconstruct(z, ae)?;
    Ok(distance(z, &rec, norm))
}

pub fn distance(a: &[f64], b: &[f64], norm: ErrorNorm) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| x - y);
    match norm {
        ErrorNorm::Mae => diffs.map(f64::abs).sum(),
        ErrorNorm::Mse => diffs.map(|d| d * d).sum(),
    }
}

/// Max-subtracted SoftMax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `p(y=i|z) ∝ exp(-gamma * d_i)` for one pixel's per-class errors.
pub fn probs_from_errors(errors: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if errors.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", errors.len())));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite {
            op: "pixel_class_probs".into(),
        });
    }
    let logits: Vec<f64> = errors.iter().map(|e| -gamma * e).collect();
    Ok(softmax(&logits))
}

/// Per-pixel, per-class reconstruction errors, pixel-major (`m` per pixel).
pub fn pixel_errors(map: &FeatureMap, aes: &[ClassAe], norm: ErrorNorm) -> Result<Vec<Vec<f64>>> {
    map.pixels()
        .map(|z| aes.iter().map(|ae| recon_error(z, ae, norm)).collect())
        .collect()
}

pub fn pixel_class_probs(map: &FeatureMap, aes: &[ClassAe], norm: ErrorNorm, gamma: f64) -> Result<Vec<Vec<f64>>> {
    pixel_errors(map, aes, norm)?
        .iter()
        .map(|e| probs_from_errors(e, gamma))
        .collect()
}

/// Reduce per-pixel errors to image probabilities: SoftMax then average
/// (SM-AP) or average the logits then SoftMax (AP-SM).
pub fn image_probs_from_errors(pixel_errors: &[Vec<f64>], gamma: f64, strategy: Strategy) -> Result<Vec<f64>> {
    let first = pixel_errors
        .first()
        .ok_or_else(|| Error::invalid("empty feature map"))?;
    let m = first.len();
    let n = pixel_errors.len() as f64;
    match strategy {
        Strategy::SmAp => {
            let mut out = vec![0.0; m];
            for e in pixel_errors {
                for (o, p) in out.iter_mut().zip(probs_from_errors(e, gamma)?) {
                    *o += p;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
            Ok(out)
        }
        Strategy::ApSm => {
            let mut mean = vec![0.0; m];
            for e in pixel_errors {
                for (o, v) in mean.iter_mut().zip(e) {
                    *o += v;
                }
            }
            mean.iter_mut().for_each(|o| *o /= n);
            probs_from_errors(&mean, gamma)
        }
    }
}

pub fn image_class_probs(
    map: &FeatureMap,
    aes: &[ClassAe],
    norm: ErrorNorm,
    gamma: f64,
    strategy: Strategy,
) -> Result<Vec<f64>> {
    image_probs_from_errors(&pixel_errors(map, aes, norm)?, gamma, strategy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// The true-class probability fell below [`LOG_FLOOR`].
    pub clamped: bool,
}

/// Negative log-probability of the true class (0-based `label`).
pub fn classification_loss(probs: &[f64], label: usize) -> Result<LossValue> {
    let p = *probs
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} outside {} classes", probs.len())))?;
    Ok(LossValue {
        loss: -p.max(LOG_FLOOR).ln(),
        clamped: p < LOG_FLOOR,
    })
}

/// Argmax with ties broken toward the lowest index.
pub fn predict_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
