use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::codebook::{Codebook, Quantized};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::{
    avg_pool2, leaky_relu, pixel_shuffle, pixel_unshuffle, Conv2d, GroupNorm, ResBlock, VarPath, VarStore,
};

/// Weights of the four compressor loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub quantization: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, perceptual: 1e-3, adversarial: 1e-2, quantization: 1.0 }
    }
}

/// Architecture and loss settings of the VQ compressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorConfig {
    /// Spatial downsampling factor `r` (power of two).
    pub downsample: usize,
    /// Latent channels `C`, equal to the code dimension.
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub hidden_channels: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
    pub weights: LossWeights,
    pub beta_commit: f64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            downsample: 8,
            latent_channels: 3,
            codebook_size: 1024,
            hidden_channels: 64,
            res_blocks: 2,
            disc_channels: 32,
            weights: LossWeights::default(),
            beta_commit: 0.25,
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return Err(invalid(format!("downsample factor {} is not a power of two", self.downsample)));
        }
        if self.codebook_size < 2 {
            return Err(invalid("codebook needs at least 2 codes"));
        }
        if self.latent_channels == 0 || self.hidden_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        let w = &self.weights;
        if [w.l1, w.perceptual, w.adversarial, w.quantization, self.beta_commit].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Latent shape `(C, H/r, W/r)` for an `H x W` image.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let r = self.downsample;
        if height % r != 0 || width % r != 0 {
            return Err(invalid(format!("{height}x{width} is not divisible by downsample factor {r}")));
        }
        Ok((self.latent_channels, height / r, width / r))
    }
}

/// Encoder, codebook and decoder of the compressor.
#[derive(Debug, Clone)]
pub struct VqCompressor {
    config: CompressorConfig,
    enc_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    codebook: Codebook,
    dec_in: Conv2d,
    dec_blocks: Vec<ResBlock>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl VqCompressor {
    pub fn new(vp: &VarPath, config: &CompressorConfig) -> Result<Self> {
        config.validate()?;
        let r2 = config.downsample * config.downsample;
        let hid = config.hidden_channels;
        let c = config.latent_channels;
        let enc = vp.pp("encoder");
        let dec = vp.pp("decoder");
        Ok(Self {
            enc_in: Conv2d::new(&enc.pp("conv_in"), r2, hid, 3)?,
            enc_blocks: (0..config.res_blocks)
                .map(|i| ResBlock::new(&enc.pp(format!("block{i}")), hid, hid, None))
                .collect::<Result<_>>()?,
            enc_norm: GroupNorm::new(&enc.pp("norm_out"), hid)?,
            enc_out: Conv2d::new(&enc.pp("conv_out"), hid, c, 3)?,
            codebook: Codebook::new(&vp.pp("codebook"), config.codebook_size, c)?,
            dec_in: Conv2d::new(&dec.pp("conv_in"), c, hid, 3)?,
            dec_blocks: (0..config.res_blocks)
                .map(|i| ResBlock::new(&dec.pp(format!("block{i}")), hid, hid, None))
                .collect::<Result<_>>()?,
            dec_norm: GroupNorm::new(&dec.pp("norm_out"), hid)?,
            dec_out: Conv2d::new(&dec.pp("conv_out"), hid, r2, 3)?,
            config: config.clone(),
        })
    }

    /// Fresh compressor with its own seeded variable store.
    pub fn init(config: &CompressorConfig, seed: u64, dtype: DType, device: &Device) -> Result<(Self, VarStore)> {
        let vs = VarStore::new(seed, dtype, device);
        let model = Self::new(&vs.root(), config)?;
        Ok((model, vs))
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// `(B, 1, H, W) -> (B, C, H/r, W/r)`, before quantization.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (b, ch, h, w) = x.dims4()?;
        if ch != 1 {
            return Err(Error::ShapeMismatch { expected: vec![b, 1, h, w], actual: vec![b, ch, h, w] });
        }
        self.config.latent_shape(h, w)?;
        let mut hdn = self.enc_in.forward(&pixel_unshuffle(x, self.config.downsample)?)?;
        for block in &self.enc_blocks {
            hdn = block.forward(&hdn, None)?;
        }
        self.enc_out.forward(&self.enc_norm.forward(&hdn)?.silu()?)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        self.codebook.quantize(z)
    }

    /// Decoder output without the final clamp (used for training).
    pub fn decode_raw(&self, z_q: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z_q.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.config.latent_channels, h, w],
                actual: vec![b, c, h, w],
            });
        }
        let mut hdn = self.dec_in.forward(z_q)?;
        for block in &self.dec_blocks {
            hdn = block.forward(&hdn, None)?;
        }
        let patches = self.dec_out.forward(&self.dec_norm.forward(&hdn)?.silu()?)?;
        pixel_shuffle(&patches, self.config.downsample)
    }

    /// `(B, C, h, w) -> (B, 1, h*r, w*r)`, clamped to [-1, 1].
    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z_q)?.clamp(-1.0, 1.0)?)
    }

    /// encode -> quantize -> decode.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.quantize(&self.encode(x)?)?;
        self.decode(&q.z_q)
    }

    pub fn encode_images(&self, images: &[&GrayImage], dtype: DType, device: &Device) -> Result<Tensor> {
        self.encode(&GrayImage::stack(images, dtype, device)?)
    }
}

/// Patch discriminator; outputs one logit per patch.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(vp: &VarPath, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&vp.pp("conv1"), 4, channels, 3)?,
            conv2: Conv2d::new(&vp.pp("conv2"), channels, 2 * channels, 3)?,
            conv3: Conv2d::new(&vp.pp("conv3"), 2 * channels, 2 * channels, 3)?,
            out: Conv2d::new(&vp.pp("out"), 2 * channels, 1, 3)?,
        })
    }

    /// `(B, 1, H, W) -> (B, 1, H/8, W/8)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(&pixel_unshuffle(x, 2)?)?, 0.2)?;
        let h = leaky_relu(&self.conv2.forward(&avg_pool2(&h)?)?, 0.2)?;
        let h = leaky_relu(&self.conv3.forward(&avg_pool2(&h)?)?, 0.2)?;
        self.out.forward(&h)
    }
}
