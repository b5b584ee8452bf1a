use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::codebook::Quantized;
use super::model::LossWeights;
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::perceptual::FeatureExtractor;
use crate::schedules::check_same_shape;

/// Per-term values of the compressor objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconLossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub quantization: f64,
    pub total: f64,
}

impl ReconLossReport {
    /// Builds a report whose `total` is the weighted sum of the parts.
    pub fn from_parts(l1: f64, perceptual: f64, adversarial: f64, quantization: f64, w: &LossWeights) -> Self {
        Self {
            l1,
            perceptual,
            adversarial,
            quantization,
            total: w.l1 * l1 + w.perceptual * perceptual + w.adversarial * adversarial + w.quantization * quantization,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l1, self.perceptual, self.adversarial, self.quantization, self.total].iter().all(|v| v.is_finite())
    }
}

/// The two terms of the quantization loss, as tensors.
#[derive(Debug, Clone)]
pub struct CommitTerms {
    pub codebook: Tensor,
    pub commit: Tensor,
}

impl From<&Quantized> for CommitTerms {
    fn from(q: &Quantized) -> Self {
        Self { codebook: q.codebook_term.clone(), commit: q.commit_term.clone() }
    }
}

/// Mean squared feature difference, averaged over the extractor's layers.
pub fn perceptual_distance(extractor: &dyn FeatureExtractor, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let fx = extractor.features(x)?;
    let fy = extractor.features(x_hat)?;
    let n = fx.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(&fy) {
        let d = (a - b)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            None => d,
            Some(s) => (s + d)?,
        });
    }
    let total = acc.ok_or_else(|| Error::ExtractorUnavailable("extractor produced no features".into()))?;
    Ok((total / n)?)
}

/// `-mean(log D)` over patch probabilities in (0, 1).
pub fn adversarial_loss(disc_score: &Tensor) -> Result<Tensor> {
    let lo = scalar(&disc_score.min_all()?)?;
    let hi = scalar(&disc_score.max_all()?)?;
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::Domain(format!("discriminator scores must lie in (0, 1), got range [{lo}, {hi}]")));
    }
    Ok(disc_score.log()?.mean_all()?.neg()?)
}

/// Differentiable compressor objective plus a scalar report.
///
/// `disc_score` holds per-patch probabilities that `x_hat` is real; every
/// entry must lie strictly inside (0, 1). `None` (discriminator still in
/// warm-up) makes the adversarial term zero.
pub fn hybrid_loss(
    x: &Tensor,
    x_hat: &Tensor,
    disc_score: Option<&Tensor>,
    commit: &CommitTerms,
    extractor: &dyn FeatureExtractor,
    weights: &LossWeights,
    beta_commit: f64,
) -> Result<(Tensor, ReconLossReport)> {
    check_same_shape(x, x_hat)?;
    let l1 = (x - x_hat)?.abs()?.mean_all()?;
    let perceptual = perceptual_distance(extractor, x, &x_hat.to_dtype(x.dtype())?)?;
    let adversarial = match disc_score {
        Some(score) => adversarial_loss(score)?,
        None => l1.zeros_like()?,
    };
    let quantization = (&commit.codebook + (&commit.commit * beta_commit)?)?;

    let total = ((&l1 * weights.l1)?
        + (&perceptual * weights.perceptual)?
        + (&adversarial * weights.adversarial)?
        + (&quantization * weights.quantization)?)?;
    let report = ReconLossReport::from_parts(
        scalar(&l1)?,
        scalar(&perceptual)?,
        scalar(&adversarial)?,
        scalar(&quantization)?,
        weights,
    );
    Ok((total, report))
}
