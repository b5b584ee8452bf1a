//! Minimal neural-network building blocks on top of `candle-core`.

mod adam;
mod layers;
mod store;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    avg_pool2, leaky_relu, pixel_shuffle, pixel_unshuffle, softmax_last, timestep_embedding, upsample2, Conv2d,
    GroupNorm, Linear, ResBlock, SpatialAttention,
};
pub use store::{Init, VarPath, VarStore};

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Fails with [`Error::Diverged`] if `value` is not finite.
pub fn ensure_finite(value: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, step, detail: format!("{what} = {value}") })
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
