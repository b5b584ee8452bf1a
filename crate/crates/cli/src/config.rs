//! Experiment configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bonesup_core::data::{ContrastCurve, PreprocessConfig, SyntheticConfig};
use bonesup_core::ldm::{EstimatorConfig, LdmTrainConfig};
use bonesup_core::sampler::ThresholdPolicy;
use bonesup_core::schedules::{make_cosine_schedule, NoiseSchedule, OffsetNoiseConfig};
use bonesup_core::vq::{CompressorConfig, VqTrainConfig};
use serde::{Deserialize, Serialize};

/// Overrides the directory that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "BONESUP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory with `cxr/` and `tissue/`; unused for synthetic data.
    pub raw_dir: Option<PathBuf>,
    /// Convert positive radiographs (e.g. JSRT) to negatives before preprocessing.
    pub negative: bool,
    pub negative_curve: ContrastCurve,
    pub blacklist: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
    pub synthetic: SyntheticConfig,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub preprocess: PreprocessConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            raw_dir: None,
            negative: false,
            negative_curve: ContrastCurve::default(),
            blacklist: None,
            synthetic_count: 0,
            synthetic_seed: 0,
            synthetic: SyntheticConfig::default(),
            ratios: [0.8, 0.1, 0.1],
            split_seed: 0,
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 0.008, beta_max: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_cosine_schedule(self.steps, self.beta_min, self.beta_max)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub seed: u64,
    /// Images denoised together per reverse chain.
    pub batch_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { seed: 0, batch_size: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub psd_bins: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { psd_bins: 201 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run directory; relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub compressor: CompressorConfig,
    pub vqgan: VqTrainConfig,
    pub estimator: EstimatorConfig,
    pub ldm: LdmTrainConfig,
    pub schedule: ScheduleConfig,
    pub offset_noise: OffsetNoiseConfig,
    pub threshold: ThresholdPolicy,
    pub sampling: SamplingConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            compressor: CompressorConfig::default(),
            vqgan: VqTrainConfig::default(),
            estimator: EstimatorConfig::default(),
            ldm: LdmTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            offset_noise: OffsetNoiseConfig::default(),
            threshold: ThresholdPolicy::default(),
            sampling: SamplingConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
pub enum Profile {
    /// Full-size defaults (1024x1024 images, r = 8).
    Full,
    /// 64x64 images, r = 4, small networks and reduced epochs for CPU runs.
    Desk,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = Self::default();
        if profile == Profile::Desk {
            c.apply_desk_profile();
        }
        c
    }

    fn apply_desk_profile(&mut self) {
        self.output_dir = PathBuf::from("runs/desk");
        self.data.synthetic_count = 500;
        self.data.preprocess.target_size = 64;
        self.compressor = CompressorConfig {
            downsample: 4,
            latent_channels: 3,
            codebook_size: 512,
            hidden_channels: 32,
            res_blocks: 1,
            disc_channels: 16,
            ..CompressorConfig::default()
        };
        self.vqgan.epochs = 30;
        self.vqgan.adv_warmup_steps = 2000;
        self.vqgan.lr_decay_every = 20;
        self.estimator = EstimatorConfig {
            latent_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            latent_size: 16,
            attention_resolutions: vec![8, 4],
            res_blocks: 1,
            time_emb_dim: 128,
        };
        self.ldm.epochs = 100;
        self.ldm.lr_decay_every = 60;
        self.evaluate.psd_bins = 32;
        self.sampling.batch_size = 10;
    }

    /// Reads `path` on top of the profile defaults.
    pub fn load(path: Option<&Path>, profile: Profile) -> Result<Self> {
        let base = Self::for_profile(profile);
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: toml::Value =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = toml::Value::try_from(&base)?;
        merge(&mut merged, overlay);
        let cfg: Self = merged.try_into().with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.preprocess.validate()?;
        self.compressor.validate()?;
        self.estimator.validate()?;
        self.offset_noise.validate()?;
        self.threshold.validate()?;
        if self.estimator.latent_channels != self.compressor.latent_channels {
            bail!(
                "estimator.latent_channels ({}) must equal compressor.latent_channels ({})",
                self.estimator.latent_channels,
                self.compressor.latent_channels
            );
        }
        let (_, lh, _) =
            self.compressor.latent_shape(self.data.preprocess.target_size, self.data.preprocess.target_size)?;
        if lh != self.estimator.latent_size {
            bail!("estimator.latent_size ({}) must equal image size / downsample ({lh})", self.estimator.latent_size);
        }
        if self.sampling.batch_size == 0 {
            bail!("sampling.batch_size must be positive");
        }
        Ok(())
    }

    /// Absolute run directory, honouring the output-root environment variable.
    pub fn run_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Sets a dotted key such as `offset_noise.lambda` from a string value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = toml::Value::try_from(&*self)?;
        let parsed: toml::Value = value
            .parse::<i64>()
            .map(toml::Value::Integer)
            .or_else(|_| value.parse::<f64>().map(toml::Value::Float))
            .or_else(|_| value.parse::<bool>().map(toml::Value::Boolean))
            .unwrap_or_else(|_| toml::Value::String(value.to_string()));
        let mut slot = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot.as_table_mut().with_context(|| format!("{key}: {part} is not a section"))?;
            if i + 1 == parts.len() {
                let old = table.get(*part).with_context(|| format!("unknown config key {key}"))?;
                // Keep floats floats when given as integers (e.g. `lambda=0`).
                let v = match (old, parsed.clone()) {
                    (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                    (_, v) => v,
                };
                table.insert(part.to_string(), v);
                break;
            }
            slot = table.get_mut(*part).with_context(|| format!("unknown config section in {key}"))?;
        }
        *self = tree.try_into().with_context(|| format!("invalid value {value:?} for {key}"))?;
        Ok(())
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sweep axis parsed from `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    Lambda,
    Omega,
    Intercept,
}

impl SweepKey {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Omega => "omega",
            Self::Intercept => "b",
        }
    }
}

impl std::str::FromStr for Sweep {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s.split_once('=').context("sweep must look like key=v1,v2,...")?;
        let key = match k.trim() {
            "lambda" => SweepKey::Lambda,
            "omega" => SweepKey::Omega,
            "b" | "intercept" => SweepKey::Intercept,
            other => bail!("unknown sweep key {other:?} (lambda, omega, b)"),
        };
        let values = v
            .split(',')
            .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad sweep value {x:?}")))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            bail!("sweep needs at least one value");
        }
        Ok(Self { key, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.schedule.steps, 1000);
        assert_eq!(c.offset_noise.lambda, 0.1);
        assert_eq!(c.threshold.omega, 0.003);
        assert_eq!(c.threshold.intercept, 1.4);
        assert_eq!(c.ldm.ema_decay, 0.995);
        assert_eq!(c.vqgan.batch_size, 4);
        assert_eq!(c.ldm.batch_size, 4);
        assert_eq!(c.vqgan.epochs, 1000);
        assert_eq!(c.ldm.epochs, 2500);
        let w = c.compressor.weights;
        assert_eq!([w.l1, w.quantization, w.perceptual, w.adversarial], [1.0, 1.0, 1e-3, 1e-2]);
        assert_eq!(c.ldm.lr, 2e-4);
        c.validate().unwrap();
        ExperimentConfig::for_profile(Profile::Desk).validate().unwrap();
    }

    #[test]
    fn file_overrides_profile() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[offset_noise]\nlambda = 0.2\n[ldm]\nepochs = 3\n").unwrap();
        let c = ExperimentConfig::load(Some(&p), Profile::Desk).unwrap();
        assert_eq!(c.offset_noise.lambda, 0.2);
        assert_eq!(c.ldm.epochs, 3);
        assert_eq!(c.data.preprocess.target_size, 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::for_profile(Profile::Desk);
        let back: ExperimentConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dotted_set() {
        let mut c = ExperimentConfig::default();
        c.set("offset_noise.lambda", "0").unwrap();
        assert_eq!(c.offset_noise.lambda, 0.0);
        c.set("threshold.kind", "static").unwrap();
        assert_eq!(c.threshold.kind, bonesup_core::sampler::ThresholdKind::Static);
        assert!(c.set("nope.key", "1").is_err());
        assert!(c.set("threshold.kind", "bogus").is_err());
    }

    #[test]
    fn sweep_parsing() {
        let s: Sweep = "lambda=0,0.05,0.1".parse().unwrap();
        assert_eq!(s.key, SweepKey::Lambda);
        assert_eq!(s.values, vec![0.0, 0.05, 0.1]);
        assert!("gamma=1".parse::<Sweep>().is_err());
        assert!("lambda".parse::<Sweep>().is_err());
    }
}
