//! Diffusion timestep schedule, forward noising and offset-noise sampling.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Offset of the cosine profile near t = 0.
const COSINE_OFFSET: f64 = 0.008;

/// Per-timestep schedule arrays, indexed `0..steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation; `sigma[t]^2 = (1 - ab[t-1]) / (1 - ab[t]) * beta[t]`.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|t| if t == 0 { 0.0 } else { ((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t]).sqrt() })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// SHA-256 over the beta array, truncated to 16 hex chars.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Cosine-shaped schedule with every beta clipped into `[beta_min, beta_max]`.
///
/// The cosine alpha-bar profile gives raw betas `1 - ab(t+1)/ab(t)`; these are
/// clipped and the cumulative products recomputed from the clipped values.
pub fn make_cosine_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("number of timesteps must be positive"));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(invalid(format!("need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]")));
    }
    let profile = |i: usize| {
        let x = (i as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let beta = (0..steps)
        .map(|i| {
            let raw = 1.0 - profile(i + 1) / profile(i);
            raw.clamp(beta_min, beta_max)
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Weight of the per-channel bias term in offset noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetNoiseConfig {
    pub lambda: f64,
}

impl Default for OffsetNoiseConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl OffsetNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("offset-noise lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Draws offset noise `eps_g + sqrt(lambda) * eta` for a `(N, C, spatial...)`
/// shape, with one standard-normal `eta` per (sample, channel) broadcast over
/// the spatial positions. Distribution per (sample, channel): `N(0, I + lambda * 11^T)`.
pub fn sample_offset_noise_with<R: Rng + ?Sized>(dims: &[usize], lambda: f64, rng: &mut R) -> Result<Vec<f32>> {
    OffsetNoiseConfig { lambda }.validate()?;
    if dims.len() < 3 {
        return Err(invalid(format!("offset noise needs (N, C, spatial..) dims, got {dims:?}")));
    }
    let groups = dims[0] * dims[1];
    let spatial: usize = dims[2..].iter().product();
    let scale = lambda.sqrt();
    let mut out = Vec::with_capacity(groups * spatial);
    for _ in 0..groups {
        let bias = if lambda > 0.0 { (scale * rng.sample::<f64, _>(StandardNormal)) as f32 } else { 0.0 };
        for _ in 0..spatial {
            out.push(rng.sample::<f32, _>(StandardNormal) + bias);
        }
    }
    Ok(out)
}

pub fn sample_offset_noise(dims: &[usize], lambda: f64, seed: u64) -> Result<Vec<f32>> {
    sample_offset_noise_with(dims, lambda, &mut rng::seeded(seed, 0))
}

pub fn offset_noise_tensor<R: Rng + ?Sized>(
    dims: &[usize],
    lambda: f64,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let data = sample_offset_noise_with(dims, lambda, rng)?;
    Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise`.
pub fn forward_noise(z0: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    check_same_shape(z0, noise)?;
    let ab = schedule.alpha_bar[t];
    Ok(((z0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// Forward noising with a separate timestep per batch element.
pub fn forward_noise_batch(z0: &Tensor, ts: &[usize], schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    check_same_shape(z0, noise)?;
    let n = z0.dim(0)?;
    if ts.len() != n {
        return Err(invalid(format!("{} timesteps for a batch of {n}", ts.len())));
    }
    for &t in ts {
        schedule.check_t(t)?;
    }
    let mut bshape = vec![1usize; z0.rank()];
    bshape[0] = n;
    let a: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar[t].sqrt()).collect();
    let s: Vec<f64> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar[t]).sqrt()).collect();
    let a = Tensor::from_vec(a, bshape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    let s = Tensor::from_vec(s, bshape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch { expected: a.dims().to_vec(), actual: b.dims().to_vec() });
    }
    Ok(())
}
