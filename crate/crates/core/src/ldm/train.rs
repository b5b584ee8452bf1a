use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::unet::{EstimatorConfig, NoiseEstimator, UNet};
use crate::checkpoint::{fingerprint_of, Checkpoint, CheckpointMeta};
use crate::error::{invalid, Error, Result};
use crate::nn::{ensure_finite, scalar, Adam, AdamConfig, VarStore};
use crate::rng;
use crate::schedules::{check_same_shape, forward_noise_batch, offset_noise_tensor, NoiseSchedule, OffsetNoiseConfig};

pub const LDM_KIND: &str = "ldm";

/// Conditional denoising objective: uniform `t`, offset noise, MSE on the noise.
pub fn diffusion_loss<R: Rng + ?Sized>(
    estimator: &dyn NoiseEstimator,
    z0: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    offset: &OffsetNoiseConfig,
    rng: &mut R,
) -> Result<Tensor> {
    check_same_shape(z0, cond)?;
    offset.validate()?;
    let n = z0.dim(0)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..schedule.steps())).collect();
    let eps = offset_noise_tensor(z0.dims(), offset.lambda, rng, z0.dtype(), z0.device())?;
    let z_t = forward_noise_batch(z0, &ts, schedule, &eps)?;
    let eps_hat = estimator.predict_noise(&z_t, &ts, cond)?;
    check_same_shape(&eps, &eps_hat)?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    /// Shadow initialized to a copy of `params`.
    pub fn new(decay: f64, params: &BTreeMap<String, Tensor>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        let shadow = params.iter().map(|(k, v)| Ok((k.clone(), v.detach().copy()?))).collect::<Result<_>>()?;
        Ok(Self { decay, shadow })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params {
            let s = self.shadow.get_mut(name).ok_or_else(|| invalid(format!("EMA has no shadow for {name}")))?;
            check_same_shape(s, p)?;
            *s = ((&*s * self.decay)? + (p.detach() * (1.0 - self.decay))?)?.detach();
        }
        Ok(())
    }
}

pub fn ema_update(ema: &mut EmaState, params: &BTreeMap<String, Tensor>) -> Result<()> {
    ema.update(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Multiplier applied to compressor latents before diffusion; sampling
    /// divides by it before quantizing.
    pub latent_scale: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many epochs (0 = never).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2500,
            batch_size: 4,
            lr: 2e-4,
            ema_decay: 0.995,
            latent_scale: 1.0,
            lr_decay_every: 1000,
            lr_decay_factor: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdmEpochLog {
    pub epoch: usize,
    pub loss: f64,
}

impl LdmEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{}", self.epoch, self.loss)
    }
}

/// Paired compressor latents (unscaled): `cond` from the radiograph,
/// `target` from the soft tissue.
#[derive(Debug, Clone)]
pub struct LatentPairs {
    pub cond: Tensor,
    pub target: Tensor,
}

impl LatentPairs {
    pub fn new(cond: Tensor, target: Tensor) -> Result<Self> {
        check_same_shape(&cond, &target)?;
        Ok(Self { cond, target })
    }

    pub fn len(&self) -> usize {
        self.cond.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct LdmTrainer {
    pub net: UNet,
    store: VarStore,
    pub ema: EmaState,
    opt: Adam,
    epoch: usize,
    schedule: NoiseSchedule,
    offset: OffsetNoiseConfig,
    estimator: EstimatorConfig,
    train: LdmTrainConfig,
    fingerprints: BTreeMap<String, String>,
}

impl LdmTrainer {
    /// `extra_fingerprints` is stored alongside the schedule and estimator
    /// fingerprints (e.g. the compressor the latents came from).
    pub fn new(
        estimator: &EstimatorConfig,
        schedule: &NoiseSchedule,
        offset: &OffsetNoiseConfig,
        train: &LdmTrainConfig,
        extra_fingerprints: BTreeMap<String, String>,
        device: &Device,
    ) -> Result<Self> {
        offset.validate()?;
        if train.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(train.latent_scale > 0.0 && train.latent_scale.is_finite()) {
            return Err(invalid(format!("latent scale must be positive, got {}", train.latent_scale)));
        }
        let (net, store) = UNet::init(estimator, rng::derive_seed(train.seed, "ldm-init", 0), DType::F32, device)?;
        let ema = EmaState::new(train.ema_decay, &store.tensors())?;
        let opt = Adam::new(store.vars(), AdamConfig::with_lr(train.lr))?;
        let mut fingerprints = extra_fingerprints;
        fingerprints.insert("schedule".into(), schedule.fingerprint());
        fingerprints.insert("estimator".into(), fingerprint_of(estimator));
        Ok(Self {
            net,
            store,
            ema,
            opt,
            epoch: 0,
            schedule: schedule.clone(),
            offset: *offset,
            estimator: estimator.clone(),
            train: train.clone(),
            fingerprints,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }

    pub fn train_epoch(&mut self, data: &LatentPairs) -> Result<LdmEpochLog> {
        if data.is_empty() {
            return Err(Error::Empty("latent training pairs".into()));
        }
        let mut order: Vec<u32> = (0..data.len() as u32).collect();
        order.shuffle(&mut rng::seeded(rng::derive_seed(self.train.seed, "ldm-shuffle", self.epoch as u64), 0));
        let mut noise_rng = rng::seeded(rng::derive_seed(self.train.seed, "ldm-noise", self.epoch as u64), 0);
        self.opt.set_lr(crate::vq::decayed_lr(
            self.train.lr,
            self.epoch,
            self.train.lr_decay_every,
            self.train.lr_decay_factor,
        ));
        let device = self.store.device().clone();
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(self.train.batch_size).enumerate() {
            let idx = Tensor::new(chunk, &device)?;
            let z0 = (data.target.index_select(&idx, 0)? * self.train.latent_scale)?;
            let cond = (data.cond.index_select(&idx, 0)? * self.train.latent_scale)?;
            let loss = diffusion_loss(&self.net, &z0, &cond, &self.schedule, &self.offset, &mut noise_rng)?;
            let value = scalar(&loss)?;
            ensure_finite(value, self.epoch, bi, "diffusion loss")?;
            self.opt.backward_step(&loss)?;
            self.ema.update(&self.store.tensors())?;
            total += value;
            batches += 1;
        }
        self.epoch += 1;
        Ok(LdmEpochLog { epoch: self.epoch, loss: total / batches as f64 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            meta: CheckpointMeta {
                kind: LDM_KIND.into(),
                epoch: self.epoch,
                step: self.opt.steps_taken(),
                fingerprints: self.fingerprints.clone(),
                config: serde_json::json!({
                    "estimator": self.estimator,
                    "train": self.train,
                    "offset": self.offset,
                    "schedule_steps": self.schedule.steps(),
                }),
            },
            tensors: Default::default(),
        };
        ck.insert_section("live", self.store.tensors());
        ck.insert_section("ema", self.ema.shadow.clone());
        ck.insert_section("opt", self.opt.state().0);
        ck
    }

    pub fn resume(
        estimator: &EstimatorConfig,
        schedule: &NoiseSchedule,
        offset: &OffsetNoiseConfig,
        train: &LdmTrainConfig,
        extra_fingerprints: BTreeMap<String, String>,
        ck: &Checkpoint,
        path: &Path,
        device: &Device,
    ) -> Result<Self> {
        ck.expect_kind(LDM_KIND, path)?;
        let mut t = Self::new(estimator, schedule, offset, train, extra_fingerprints, device)?;
        for (name, expected) in &t.fingerprints {
            let found = ck.fingerprint(name).unwrap_or_default();
            if found != expected {
                return Err(Error::FingerprintMismatch {
                    what: name.clone(),
                    expected: expected.clone(),
                    found: found.into(),
                });
            }
        }
        t.store.load(&ck.section("live"))?;
        let ema = ck.section("ema");
        for (name, s) in t.ema.shadow.iter_mut() {
            let v = ema.get(name).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("missing EMA tensor {name}"),
            })?;
            check_same_shape(s, v)?;
            *s = v.to_dtype(s.dtype())?;
        }
        t.opt.load_state(&ck.section("opt"), ck.meta.step)?;
        t.epoch = ck.meta.epoch;
        Ok(t)
    }
}

/// Rebuilds the estimator from a checkpoint using its EMA weights, together
/// with the latent scale it was trained with.
///
/// Fails if the checkpoint was trained with a different schedule.
pub fn load_estimator(ck: &Checkpoint, path: &Path, schedule: &NoiseSchedule, device: &Device) -> Result<(UNet, f64)> {
    ck.expect_kind(LDM_KIND, path)?;
    let expected = schedule.fingerprint();
    let found = ck.fingerprint("schedule").unwrap_or_default();
    if found != expected {
        return Err(Error::FingerprintMismatch { what: "noise schedule".into(), expected, found: found.into() });
    }
    let config: EstimatorConfig = serde_json::from_value(ck.meta.config["estimator"].clone())?;
    let (net, store) = UNet::init(&config, 0, DType::F32, device)?;
    store.load(&ck.section("ema"))?;
    let train: LdmTrainConfig = serde_json::from_value(ck.meta.config["train"].clone())?;
    Ok((net, train.latent_scale))
}

pub fn train_ldm(
    data: &LatentPairs,
    estimator: &EstimatorConfig,
    schedule: &NoiseSchedule,
    offset: &OffsetNoiseConfig,
    train: &LdmTrainConfig,
    device: &Device,
) -> Result<(LdmTrainer, Vec<LdmEpochLog>)> {
    let mut trainer = LdmTrainer::new(estimator, schedule, offset, train, BTreeMap::new(), device)?;
    let mut log = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        log.push(trainer.train_epoch(data)?);
    }
    Ok((trainer, log))
}
