//! Vector-quantized image compressor: encoder, codebook, decoder, patch
//! discriminator and the hybrid training objective.

mod codebook;
mod loss;
mod model;
mod train;

pub use codebook::{usage_fraction, Codebook, Quantized};
pub use loss::{adversarial_loss, hybrid_loss, perceptual_distance, CommitTerms, ReconLossReport};
pub use model::{CompressorConfig, LossWeights, PatchDiscriminator, VqCompressor};
pub(crate) use train::decayed_lr;
pub use train::{load_compressor, train_vqgan, VqEpochLog, VqTrainConfig, VqTrainer, VQGAN_KIND};
