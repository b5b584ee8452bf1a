use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::codebook::usage_fraction;
use super::loss::{hybrid_loss, CommitTerms, ReconLossReport};
use super::model::{CompressorConfig, PatchDiscriminator, VqCompressor};
use crate::checkpoint::{fingerprint_of, Checkpoint, CheckpointMeta};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::{ensure_finite, scalar, Adam, AdamConfig, VarStore};
use crate::perceptual::SeededConvExtractor;
use crate::rng;

pub const VQGAN_KIND: &str = "vqgan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Encoder, codebook and decoder.
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Optimizer steps before the adversarial term and discriminator updates start.
    pub adv_warmup_steps: usize,
    /// Multiply learning rates by `lr_decay_factor` every this many epochs (0 = never).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_discriminator: 5e-4,
            adv_warmup_steps: 10_000,
            lr_decay_every: 400,
            lr_decay_factor: 0.5,
            seed: 0,
        }
    }
}

pub(crate) fn decayed_lr(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    if every == 0 {
        base
    } else {
        base * factor.powi((epoch / every) as i32)
    }
}

/// One row of the compressor training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqEpochLog {
    pub epoch: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub quantization: f64,
    pub total: f64,
    pub codebook_usage: f64,
}

impl VqEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,l1,perceptual,adversarial,quantization,total,codebook_usage";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.l1, self.perceptual, self.adversarial, self.quantization, self.total, self.codebook_usage
        )
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + exp(x))`, computed stably.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Alternating generator/discriminator optimization of the compressor.
pub struct VqTrainer {
    pub model: VqCompressor,
    gen_store: VarStore,
    disc: PatchDiscriminator,
    disc_store: VarStore,
    extractor: SeededConvExtractor,
    opt_g: Adam,
    opt_d: Adam,
    epoch: usize,
    config: CompressorConfig,
    train: VqTrainConfig,
}

impl VqTrainer {
    pub fn new(config: &CompressorConfig, train: &VqTrainConfig, device: &Device) -> Result<Self> {
        if train.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        let dtype = DType::F32;
        let (model, gen_store) = VqCompressor::init(config, rng::derive_seed(train.seed, "vq-gen", 0), dtype, device)?;
        let disc_store = VarStore::new(rng::derive_seed(train.seed, "vq-disc", 0), dtype, device);
        let disc = PatchDiscriminator::new(&disc_store.root(), config.disc_channels)?;
        let opt_g = Adam::new(
            gen_store.vars(),
            AdamConfig { beta1: 0.5, beta2: 0.9, ..AdamConfig::with_lr(train.lr_generator) },
        )?;
        let opt_d = Adam::new(
            disc_store.vars(),
            AdamConfig { beta1: 0.5, beta2: 0.9, ..AdamConfig::with_lr(train.lr_discriminator) },
        )?;
        Ok(Self {
            model,
            gen_store,
            disc,
            disc_store,
            extractor: SeededConvExtractor::new(dtype, device)?,
            opt_g,
            opt_d,
            epoch: 0,
            config: config.clone(),
            train: train.clone(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn generator_store(&self) -> &VarStore {
        &self.gen_store
    }

    pub fn train_epoch(&mut self, images: &[GrayImage]) -> Result<VqEpochLog> {
        if images.is_empty() {
            return Err(Error::Empty("compressor training corpus".into()));
        }
        let device = self.gen_store.device().clone();
        let dtype = self.gen_store.dtype();
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive_seed(self.train.seed, "vq-shuffle", self.epoch as u64), 0));
        let t = &self.train;
        self.opt_g.set_lr(decayed_lr(t.lr_generator, self.epoch, t.lr_decay_every, t.lr_decay_factor));
        self.opt_d.set_lr(decayed_lr(t.lr_discriminator, self.epoch, t.lr_decay_every, t.lr_decay_factor));

        let mut sum = ReconLossReport::default();
        let mut batches = 0usize;
        let mut indices = Vec::new();
        for (bi, chunk) in order.chunks(self.train.batch_size).enumerate() {
            let refs: Vec<&GrayImage> = chunk.iter().map(|&i| &images[i]).collect();
            let x = GrayImage::stack(&refs, dtype, &device)?;
            let z = self.model.encode(&x)?;
            let q = self.model.quantize(&z)?;
            let x_hat = self.model.decode_raw(&q.z_q)?;
            let adversarial_on = self.opt_g.steps_taken() >= self.train.adv_warmup_steps;

            let score = if adversarial_on {
                Some(sigmoid(&self.disc.forward(&x_hat)?)?.clamp(1e-6, 1.0 - 1e-6)?)
            } else {
                None
            };
            let (total, report) = hybrid_loss(
                &x,
                &x_hat,
                score.as_ref(),
                &CommitTerms::from(&q),
                &self.extractor,
                &self.config.weights,
                self.config.beta_commit,
            )?;
            ensure_finite(report.total, self.epoch, bi, "compressor loss")?;
            self.opt_g.backward_step(&total)?;

            if adversarial_on {
                let real = self.disc.forward(&x)?;
                let fake = self.disc.forward(&x_hat.detach())?;
                let d_loss = (softplus(&real.neg()?)?.mean_all()? + softplus(&fake)?.mean_all()?)?;
                ensure_finite(scalar(&d_loss)?, self.epoch, bi, "discriminator loss")?;
                self.opt_d.backward_step(&d_loss)?;
            }

            sum.l1 += report.l1;
            sum.perceptual += report.perceptual;
            sum.adversarial += report.adversarial;
            sum.quantization += report.quantization;
            sum.total += report.total;
            batches += 1;
            indices.extend_from_slice(&q.indices);
        }
        self.epoch += 1;
        let n = batches as f64;
        Ok(VqEpochLog {
            epoch: self.epoch,
            l1: sum.l1 / n,
            perceptual: sum.perceptual / n,
            adversarial: sum.adversarial / n,
            quantization: sum.quantization / n,
            total: sum.total / n,
            codebook_usage: usage_fraction(&indices, self.config.codebook_size),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            meta: CheckpointMeta {
                kind: VQGAN_KIND.into(),
                epoch: self.epoch,
                step: self.opt_g.steps_taken(),
                fingerprints: BTreeMap::from([("compressor".to_string(), fingerprint_of(&self.config))]),
                config: serde_json::json!({ "compressor": self.config, "train": self.train }),
            },
            tensors: Default::default(),
        };
        ck.insert_section("gen", self.gen_store.tensors());
        ck.insert_section("disc", self.disc_store.tensors());
        let (sg, _) = self.opt_g.state();
        ck.insert_section("opt_g", sg);
        let (sd, step_d) = self.opt_d.state();
        ck.insert_section("opt_d", sd);
        ck.meta.config["disc_steps"] = serde_json::json!(step_d);
        ck
    }

    /// Restores weights, optimizer moments and the epoch counter.
    pub fn resume(
        config: &CompressorConfig,
        train: &VqTrainConfig,
        ck: &Checkpoint,
        path: &Path,
        device: &Device,
    ) -> Result<Self> {
        ck.expect_kind(VQGAN_KIND, path)?;
        let expected = fingerprint_of(config);
        let found = ck.fingerprint("compressor").unwrap_or_default();
        if found != expected {
            return Err(Error::FingerprintMismatch { what: "compressor config".into(), expected, found: found.into() });
        }
        let mut t = Self::new(config, train, device)?;
        t.gen_store.load(&ck.section("gen"))?;
        t.disc_store.load(&ck.section("disc"))?;
        t.opt_g.load_state(&ck.section("opt_g"), ck.meta.step)?;
        let disc_steps = ck.meta.config["disc_steps"].as_u64().unwrap_or(0) as usize;
        t.opt_d.load_state(&ck.section("opt_d"), disc_steps)?;
        t.epoch = ck.meta.epoch;
        Ok(t)
    }
}

/// Loads a frozen compressor for inference from a checkpoint.
pub fn load_compressor(ck: &Checkpoint, path: &Path, device: &Device) -> Result<VqCompressor> {
    ck.expect_kind(VQGAN_KIND, path)?;
    let config: CompressorConfig = serde_json::from_value(ck.meta.config["compressor"].clone())?;
    let (model, store) = VqCompressor::init(&config, 0, DType::F32, device)?;
    store.load(&ck.section("gen"))?;
    Ok(model)
}

/// Trains a fresh compressor for `train.epochs` epochs.
pub fn train_vqgan(
    images: &[GrayImage],
    config: &CompressorConfig,
    train: &VqTrainConfig,
    device: &Device,
) -> Result<(VqTrainer, Vec<VqEpochLog>)> {
    let mut trainer = VqTrainer::new(config, train, device)?;
    let mut log = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        log.push(trainer.train_epoch(images)?);
    }
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (CompressorConfig, VqTrainConfig) {
        (
            CompressorConfig {
                downsample: 4,
                latent_channels: 3,
                codebook_size: 32,
                hidden_channels: 8,
                res_blocks: 1,
                disc_channels: 4,
                ..Default::default()
            },
            VqTrainConfig { epochs: 1, adv_warmup_steps: 1, seed: 3, ..Default::default() },
        )
    }

    fn corpus(n: usize) -> Vec<GrayImage> {
        (0..n)
            .map(|i| {
                let data = (0..16 * 16).map(|p| (((p % 16) as f32 * 0.3 + i as f32).sin()) * 0.8).collect();
                GrayImage::new(16, 16, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn one_epoch_smoke() {
        let (c, t) = tiny();
        let (_, log) = train_vqgan(&corpus(8), &c, &t, &Device::Cpu).unwrap();
        assert_eq!(log.len(), 1);
        let r = log[0];
        assert!([r.l1, r.perceptual, r.adversarial, r.quantization, r.total].iter().all(|v| v.is_finite()));
        assert!(r.codebook_usage > 0.0 && r.codebook_usage <= 1.0);
    }

    #[test]
    fn checkpoint_resume_continues_identically() {
        let (c, t) = tiny();
        let images = corpus(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vq.ckpt");

        let mut straight = VqTrainer::new(&c, &t, &Device::Cpu).unwrap();
        straight.train_epoch(&images).unwrap();
        let second = straight.train_epoch(&images).unwrap();

        let mut first = VqTrainer::new(&c, &t, &Device::Cpu).unwrap();
        first.train_epoch(&images).unwrap();
        first.checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path, &Device::Cpu).unwrap();
        let mut resumed = VqTrainer::resume(&c, &t, &ck, &path, &Device::Cpu).unwrap();
        assert_eq!(resumed.epochs_done(), 1);
        let again = resumed.train_epoch(&images).unwrap();
        assert_eq!(second, again);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let (c, t) = tiny();
        let mut tr = VqTrainer::new(&c, &t, &Device::Cpu).unwrap();
        assert!(matches!(tr.train_epoch(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn lr_decay_steps() {
        assert_eq!(decayed_lr(1.0, 0, 10, 0.5), 1.0);
        assert_eq!(decayed_lr(1.0, 25, 10, 0.5), 0.25);
        assert_eq!(decayed_lr(1.0, 25, 0, 0.5), 1.0);
    }
}
