use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    avg_pool2, timestep_embedding, upsample2, Conv2d, GroupNorm, Linear, ResBlock, SpatialAttention, VarPath, VarStore,
};

/// Shape of the conditional noise estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Latent channel count `C`; the network sees `2C` inputs and emits `C`.
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level, finest first.
    pub channel_mults: Vec<usize>,
    /// Latent spatial size (height) of the finest level.
    pub latent_size: usize,
    /// Level sizes at which self-attention is applied.
    pub attention_resolutions: Vec<usize>,
    pub res_blocks: usize,
    pub time_emb_dim: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            latent_size: 128,
            attention_resolutions: vec![64, 32],
            res_blocks: 2,
            time_emb_dim: 256,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || self.res_blocks == 0 || self.time_emb_dim < 2 {
            return Err(invalid("estimator sizes must be positive"));
        }
        if self.latent_size == 0 {
            return Err(invalid("latent size must be positive"));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(invalid("channel multipliers must be a non-empty list of positive values"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels
    }
}

/// Anything that predicts the injected noise from `(z_t, t, condition)`.
pub trait NoiseEstimator {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor>;
}

struct Level {
    blocks: Vec<ResBlock>,
    attn: Vec<Option<SpatialAttention>>,
}

/// U-Net with timestep-conditioned residual blocks and attention at selected
/// resolutions; the condition enters by channel concatenation with `z_t`.
pub struct UNet {
    config: EstimatorConfig,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    down: Vec<Level>,
    mid: (ResBlock, SpatialAttention, ResBlock),
    up: Vec<Level>,
    up_convs: Vec<Conv2d>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl UNet {
    pub fn new(vp: &VarPath, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let temb = config.time_emb_dim;
        let chans: Vec<usize> = config.channel_mults.iter().map(|m| m * config.base_channels).collect();
        let levels = chans.len();

        let attn_at = |vp: &VarPath, ch: usize, level: usize| -> Result<Option<SpatialAttention>> {
            if config.attention_resolutions.contains(&(config.latent_size >> level)) {
                SpatialAttention::new(vp, ch).map(Some)
            } else {
                Ok(None)
            }
        };

        let mut down = Vec::with_capacity(levels);
        let mut skip_chans = Vec::new();
        let mut ch = chans[0];
        for (i, &out) in chans.iter().enumerate() {
            let lp = vp.pp(format!("down{i}"));
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for j in 0..config.res_blocks {
                blocks.push(ResBlock::new(&lp.pp(format!("res{j}")), ch, out, Some(temb))?);
                attn.push(attn_at(&lp.pp(format!("attn{j}")), out, i)?);
                ch = out;
                skip_chans.push(ch);
            }
            down.push(Level { blocks, attn });
        }
        let mp = vp.pp("mid");
        let mid = (
            ResBlock::new(&mp.pp("res0"), ch, ch, Some(temb))?,
            SpatialAttention::new(&mp.pp("attn"), ch)?,
            ResBlock::new(&mp.pp("res1"), ch, ch, Some(temb))?,
        );
        let mut up = Vec::with_capacity(levels);
        let mut up_convs = Vec::new();
        for (i, &out) in chans.iter().enumerate().rev() {
            let lp = vp.pp(format!("up{i}"));
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for j in 0..config.res_blocks {
                let skip = skip_chans.pop().expect("one skip per down block");
                blocks.push(ResBlock::new(&lp.pp(format!("res{j}")), ch + skip, out, Some(temb))?);
                attn.push(attn_at(&lp.pp(format!("attn{j}")), out, i)?);
                ch = out;
            }
            up.push(Level { blocks, attn });
            if i > 0 {
                up_convs.push(Conv2d::new(&lp.pp("upconv"), ch, ch, 3)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            time1: Linear::new(&vp.pp("time1"), config.base_channels, temb)?,
            time2: Linear::new(&vp.pp("time2"), temb, temb)?,
            input: Conv2d::new(&vp.pp("input"), config.input_channels(), chans[0], 3)?,
            down,
            mid,
            up,
            up_convs,
            out_norm: GroupNorm::new(&vp.pp("out_norm"), ch)?,
            out: Conv2d::new(&vp.pp("out"), ch, config.latent_channels, 3)?,
        })
    }

    pub fn init(config: &EstimatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<(Self, VarStore)> {
        let store = VarStore::new(seed, dtype, device);
        let net = Self::new(&store.root(), config)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Channel count of the first convolution's input.
    pub fn first_layer_in_channels(&self) -> usize {
        self.input.in_channels()
    }

    fn forward(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        if z_t.dims() != cond.dims() {
            return Err(Error::ShapeMismatch { expected: z_t.dims().to_vec(), actual: cond.dims().to_vec() });
        }
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.config.latent_channels, h, w],
                actual: z_t.dims().to_vec(),
            });
        }
        if ts.len() != b {
            return Err(invalid(format!("{} timesteps for a batch of {b}", ts.len())));
        }
        let levels = self.down.len();
        let factor = 1usize << (levels - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(invalid(format!("latent size {h}x{w} must be divisible by {factor} for {levels} levels")));
        }
        let emb = timestep_embedding(ts, self.config.base_channels, z_t.dtype(), z_t.device())?;
        let temb = self.time2.forward(&self.time1.forward(&emb)?.silu()?)?;

        let mut x = self.input.forward(&Tensor::cat(&[z_t, cond], 1)?)?;
        let mut skips = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                x = block.forward(&x, Some(&temb))?;
                if let Some(a) = attn {
                    x = a.forward(&x)?;
                }
                skips.push(x.clone());
            }
            if i + 1 < levels {
                x = avg_pool2(&x)?;
            }
        }
        x = self.mid.0.forward(&x, Some(&temb))?;
        x = self.mid.1.forward(&x)?;
        x = self.mid.2.forward(&x, Some(&temb))?;
        for (k, level) in self.up.iter().enumerate() {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                let skip = skips.pop().expect("one skip per up block");
                x = block.forward(&Tensor::cat(&[&x, &skip], 1)?, Some(&temb))?;
                if let Some(a) = attn {
                    x = a.forward(&x)?;
                }
            }
            if k + 1 < levels {
                x = self.up_convs[k].forward(&upsample2(&x)?)?;
            }
        }
        self.out.forward(&self.out_norm.forward(&x)?.silu()?)
    }
}

impl NoiseEstimator for UNet {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.forward(z_t, ts, cond)
    }
}
