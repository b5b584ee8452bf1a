//! Layers built only from reshapes, concatenations and matrix products, so
//! both the forward and backward passes run through gemm.

use candle_core::{Tensor, D};

use super::store::{Init, VarPath};
use crate::error::Result;

/// Square same-padding convolution, stride 1, odd kernel size.
///
/// The input is expanded into `k*k` shifted views concatenated along the
/// channel axis and multiplied by a `(out, k*k*in)` weight matrix whose
/// columns are ordered `(dy, dx, in_channel)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(vp: &VarPath, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        Self::with_init(vp, in_channels, out_channels, kernel, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        vp: &VarPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            weight: vp.get((out_channels, fan_in), "weight", weight_init)?,
            bias: vp.get(out_channels, "bias", bias_init)?,
            kernel,
            in_channels,
            out_channels,
        })
    }

    /// Copy whose weights are cut from the autograd graph.
    pub fn detached(&self) -> Self {
        Self { weight: self.weight.detach(), bias: self.bias.detach(), ..self.clone() }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        debug_assert_eq!(c, self.in_channels);
        let cols = if self.kernel == 1 {
            x.reshape((b, c, h * w))?
        } else {
            let p = self.kernel / 2;
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut parts = Vec::with_capacity(self.kernel * self.kernel);
            for dy in 0..self.kernel {
                for dx in 0..self.kernel {
                    parts.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
            Tensor::cat(&parts, 1)?.reshape((b, self.kernel * self.kernel * c, h * w))?
        };
        let y = self.weight.broadcast_matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(y.reshape((b, self.out_channels, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vp: &VarPath, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: vp.get((out_features, in_features), "weight", Init::Uniform(bound))?,
            bias: vp.get(out_features, "bias", Init::Uniform(bound))?,
        })
    }

    /// `(B, in) -> (B, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vp: &VarPath, channels: usize) -> Result<Self> {
        let groups = [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            gamma: vp.get(channels, "gamma", Init::Ones)?,
            beta: vp.get(channels, "beta", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xg = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// 2x2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.contiguous()?.reshape((b, c, h * 2, w * 2))?)
}

/// `(B, C, H, W) -> (B, C*r*r, H/r, W/r)`
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / r, r, w / r, r))?.permute((0, 1, 3, 5, 2, 4))?.contiguous()?.reshape((
        b,
        c * r * r,
        h / r,
        w / r,
    ))?)
}

/// `(B, C*r*r, h, w) -> (B, C, h*r, w*r)`
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    let c = crr / (r * r);
    Ok(x.reshape((b, c, r, r, h, w))?.permute((0, 1, 4, 2, 5, 3))?.contiguous()?.reshape((b, c, h * r, w * r))?)
}

/// Residual block with optional timestep conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(vp: &VarPath, in_ch: usize, out_ch: usize, time_dim: Option<usize>) -> Result<Self> {
        let skip = if in_ch != out_ch { Some(Conv2d::new(&vp.pp("skip"), in_ch, out_ch, 1)?) } else { None };
        Ok(Self {
            norm1: GroupNorm::new(&vp.pp("norm1"), in_ch)?,
            conv1: Conv2d::new(&vp.pp("conv1"), in_ch, out_ch, 3)?,
            time_proj: time_dim.map(|d| Linear::new(&vp.pp("time_proj"), d, out_ch)).transpose()?,
            norm2: GroupNorm::new(&vp.pp("norm2"), out_ch)?,
            conv2: Conv2d::new(&vp.pp("conv2"), out_ch, out_ch, 3)?,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            let t = proj.forward(&temb.silu()?)?;
            let (b, c) = t.dims2()?;
            h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head self-attention over spatial positions.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl SpatialAttention {
    pub fn new(vp: &VarPath, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&vp.pp("norm"), channels)?,
            qkv: Conv2d::new(&vp.pp("qkv"), channels, 3 * channels, 1)?,
            proj: Conv2d::new(&vp.pp("proj"), channels, channels, 1)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3 * c, h * w))?;
        let q = qkv.narrow(1, 0, c)?;
        let k = qkv.narrow(1, c, c)?;
        let v = qkv.narrow(1, 2 * c, c)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let scores = (q.transpose(1, 2)?.contiguous()?.matmul(&k.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let out = v.contiguous()?.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(
    ts: &[usize],
    dim: usize,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}
