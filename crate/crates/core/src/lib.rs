//! Bone suppression for chest radiographs with a latent conditional
//! diffusion model.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod image;
pub mod ldm;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod vq;

pub use error::{Error, Result};
