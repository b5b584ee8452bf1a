//! Feature extractors shared by the perceptual training loss and LPIPS.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::{avg_pool2, pixel_unshuffle, Conv2d, Init, VarStore};

/// Maps a `(B, 1, H, W)` batch to a list of feature maps `(B, F, h, w)`.
pub trait FeatureExtractor {
    /// Label written into reports so readers know which network produced a score.
    fn name(&self) -> &str;
    fn dtype(&self) -> DType;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns the input itself as the single feature map; LPIPS then reduces to MSE.
#[derive(Debug, Clone, Copy)]
pub struct IdentityExtractor {
    pub dtype: DType,
}

impl Default for IdentityExtractor {
    fn default() -> Self {
        Self { dtype: DType::F64 }
    }
}

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

pub const SEEDED_EXTRACTOR_SEED: u64 = 0x1f5e_ed00;

/// Three-stage ReLU conv net with fixed, seeded He-normal weights. Stands in
/// for a pretrained network when none is available offline.
#[derive(Debug, Clone)]
pub struct SeededConvExtractor {
    stages: Vec<Conv2d>,
    dtype: DType,
}

impl SeededConvExtractor {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let vs = VarStore::new(SEEDED_EXTRACTOR_SEED, dtype, device);
        let root = vs.root();
        let mut stages = Vec::new();
        for (i, (cin, cout)) in [(4, 16), (16, 32), (32, 32)].into_iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let conv = Conv2d::with_init(&root.pp(format!("stage{i}")), cin, cout, 3, Init::Normal(std), Init::Zeros)?;
            stages.push(conv.detached());
        }
        Ok(Self { stages, dtype })
    }
}

impl FeatureExtractor for SeededConvExtractor {
    fn name(&self) -> &str {
        "seeded-conv"
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = pixel_unshuffle(x, 2)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = avg_pool2(&h)?;
            }
            h = stage.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
