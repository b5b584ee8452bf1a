//! Conditional noise estimator and its training loop.

mod train;
mod unet;

pub use train::{
    diffusion_loss, ema_update, load_estimator, train_ldm, EmaState, LatentPairs, LdmEpochLog, LdmTrainConfig,
    LdmTrainer, LDM_KIND,
};
pub use unet::{EstimatorConfig, NoiseEstimator, UNet};
