//! Implementations of the CLI subcommands.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bonesup_core::checkpoint::{fingerprint_of, Checkpoint};
use bonesup_core::data::{prepare_dataset, DataSource, LoadedPair, Manifest, PrepareConfig, PrepareOutcome, Split};
use bonesup_core::image::GrayImage;
use bonesup_core::ldm::{load_estimator, LatentPairs, LdmEpochLog, LdmTrainer, LDM_KIND};
use bonesup_core::metrics::{evaluate_pair, psd_profile, ImageMetrics, MeanStd, MetricReport, PsdProfile};
use bonesup_core::perceptual::{FeatureExtractor, SeededConvExtractor};
use bonesup_core::rng;
use bonesup_core::sampler::{SamplerTrace, SoftTissueSampler, ThresholdKind, ThresholdPolicy};
use bonesup_core::schedules::OffsetNoiseConfig;
use bonesup_core::vq::{load_compressor, VqCompressor, VqEpochLog, VqTrainer, VQGAN_KIND};
use candle_core::{DType, Device, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Sweep, SweepKey};

/// Standard file layout inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { root: cfg.run_dir() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vqgan_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints").join("vqgan.ckpt")
    }

    pub fn ldm_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints").join("ldm.ckpt")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn samples(&self, name: &str) -> PathBuf {
        self.root.join("samples").join(name)
    }

    pub fn reports(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn device() -> Device {
    Device::Cpu
}

fn write_config_snapshot(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    std::fs::create_dir_all(&paths.root)?;
    std::fs::write(paths.root.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

// ---------------------------------------------------------------- prepare

pub fn prepare(cfg: &ExperimentConfig, force: bool) -> Result<PrepareOutcome> {
    let paths = RunPaths::new(cfg);
    let d = &cfg.data;
    let source = match (&d.raw_dir, d.synthetic_count) {
        (_, n) if n > 0 => DataSource::Synthetic { count: n, seed: d.synthetic_seed, config: d.synthetic.clone() },
        (Some(dir), _) => DataSource::Directory {
            path: dir.clone(),
            negative: d.negative.then_some(d.negative_curve),
            blacklist: d.blacklist.clone(),
        },
        (None, _) => bail!("no data source: set data.raw_dir or pass --synthetic N"),
    };
    let pc = PrepareConfig { source, preprocess: d.preprocess.clone(), ratios: d.ratios, split_seed: d.split_seed };
    let outcome = prepare_dataset(&pc, &paths.data(), force)?;
    write_config_snapshot(cfg, &paths)?;
    Ok(outcome)
}

fn load_manifest(paths: &RunPaths) -> Result<Manifest> {
    Manifest::load(&paths.data()).with_context(|| format!("loading dataset under {}", paths.data().display()))
}

// ------------------------------------------------------------------ train

/// Appends CSV rows, creating the file with `header` when needed and
/// dropping rows past `keep_epochs` (left by an interrupted run).
struct EpochLog {
    path: PathBuf,
}

impl EpochLog {
    fn open(path: PathBuf, header: &str, keep_epochs: usize) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut lines = vec![header.to_string()];
        if keep_epochs > 0 && path.exists() {
            let text = std::fs::read_to_string(&path)?;
            lines.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= keep_epochs)
                    })
                    .map(str::to_string),
            );
        }
        std::fs::write(&path, lines.join("\n") + "\n")?;
        Ok(Self { path })
    }

    fn append(&self, row: &str) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{row}")?;
        f.sync_data()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    /// Finished this many new epochs, ending at the given epoch.
    Trained {
        new_epochs: usize,
        epoch: usize,
    },
    AlreadyDone {
        epoch: usize,
    },
}

fn train_pairs(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<LoadedPair>> {
    let pairs = manifest.load_split(Split::Train)?;
    let Some(first) = pairs.first() else {
        bail!("the training split is empty");
    };
    let s = cfg.data.preprocess.target_size;
    if first.cxr.height != s || first.cxr.width != s {
        bail!(
            "prepared images are {}x{} but the config expects {s}x{s}; rerun `prepare` with this config",
            first.cxr.height,
            first.cxr.width
        );
    }
    Ok(pairs)
}

fn train_images(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<GrayImage>> {
    let pairs = train_pairs(cfg, manifest)?;
    // One compressor serves both domains.
    Ok(pairs.into_iter().flat_map(|p| [p.cxr, p.tissue]).collect())
}

pub fn train_vqgan(cfg: &ExperimentConfig) -> Result<TrainStatus> {
    let paths = RunPaths::new(cfg);
    let manifest = load_manifest(&paths)?;
    let ckpt = paths.vqgan_ckpt();
    let dev = device();
    let mut trainer = if ckpt.exists() {
        let ck = Checkpoint::load(&ckpt, &dev)?;
        let t = VqTrainer::resume(&cfg.compressor, &cfg.vqgan, &ck, &ckpt, &dev)
            .with_context(|| format!("resuming from {}", ckpt.display()))?;
        info!("resuming compressor training at epoch {}", t.epochs_done());
        t
    } else {
        VqTrainer::new(&cfg.compressor, &cfg.vqgan, &dev)?
    };
    let start = trainer.epochs_done();
    if start >= cfg.vqgan.epochs {
        return Ok(TrainStatus::AlreadyDone { epoch: start });
    }
    let images = train_images(cfg, &manifest)?;
    let log = EpochLog::open(paths.log("vqgan_loss.csv"), VqEpochLog::CSV_HEADER, start)?;
    write_config_snapshot(cfg, &paths)?;
    while trainer.epochs_done() < cfg.vqgan.epochs {
        let row = trainer.train_epoch(&images)?;
        // Log first: a row past the checkpoint epoch is dropped on resume.
        log.append(&row.csv_row())?;
        trainer.checkpoint().save(&ckpt)?;
        info!(
            "vqgan epoch {}/{}: total {:.5} l1 {:.5} usage {:.3}",
            row.epoch, cfg.vqgan.epochs, row.total, row.l1, row.codebook_usage
        );
    }
    Ok(TrainStatus::Trained { new_epochs: cfg.vqgan.epochs - start, epoch: cfg.vqgan.epochs })
}

/// Identity of a trained compressor, stored in every downstream artifact.
fn compressor_fingerprint(ck: &Checkpoint) -> String {
    fingerprint_of(&(&ck.meta.config, ck.meta.epoch, ck.meta.step))
}

fn load_vqgan(paths: &RunPaths) -> Result<(VqCompressor, String)> {
    let path = paths.vqgan_ckpt();
    if !path.exists() {
        bail!("no compressor checkpoint at {}; run `train --stage vqgan` first", path.display());
    }
    let ck = Checkpoint::load(&path, &device())?;
    ck.expect_kind(VQGAN_KIND, &path)?;
    Ok((load_compressor(&ck, &path, &device())?, compressor_fingerprint(&ck)))
}

fn encode_all(model: &VqCompressor, images: &[&GrayImage], batch: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in images.chunks(batch.max(1)) {
        parts.push(model.encode_images(chunk, DType::F32, &device())?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn latent_pairs(model: &VqCompressor, pairs: &[LoadedPair]) -> Result<LatentPairs> {
    let cxr: Vec<&GrayImage> = pairs.iter().map(|p| &p.cxr).collect();
    let tissue: Vec<&GrayImage> = pairs.iter().map(|p| &p.tissue).collect();
    Ok(LatentPairs::new(encode_all(model, &cxr, 16)?, encode_all(model, &tissue, 16)?)?)
}

/// Trains (or resumes) a noise estimator into `ckpt` with the given offset noise.
pub fn train_ldm_at(
    cfg: &ExperimentConfig,
    offset: OffsetNoiseConfig,
    ckpt: &Path,
    log_path: &Path,
) -> Result<TrainStatus> {
    let paths = RunPaths::new(cfg);
    let (compressor, comp_fp) = load_vqgan(&paths)?;
    let schedule = cfg.schedule.build()?;
    let extra =
        BTreeMap::from([("compressor".to_string(), comp_fp), ("offset_noise".to_string(), fingerprint_of(&offset))]);
    let dev = device();
    let mut trainer = if ckpt.exists() {
        let ck = Checkpoint::load(ckpt, &dev)?;
        let t = LdmTrainer::resume(&cfg.estimator, &schedule, &offset, &cfg.ldm, extra, &ck, ckpt, &dev)
            .with_context(|| format!("resuming from {}", ckpt.display()))?;
        info!("resuming estimator training at epoch {}", t.epochs_done());
        t
    } else {
        LdmTrainer::new(&cfg.estimator, &schedule, &offset, &cfg.ldm, extra, &dev)?
    };
    let start = trainer.epochs_done();
    if start >= cfg.ldm.epochs {
        return Ok(TrainStatus::AlreadyDone { epoch: start });
    }
    let manifest = load_manifest(&paths)?;
    let data = latent_pairs(&compressor, &train_pairs(cfg, &manifest)?)?;
    let log = EpochLog::open(log_path.to_path_buf(), LdmEpochLog::CSV_HEADER, start)?;
    while trainer.epochs_done() < cfg.ldm.epochs {
        let row = trainer.train_epoch(&data)?;
        log.append(&row.csv_row())?;
        trainer.checkpoint().save(ckpt)?;
        info!("ldm epoch {}/{}: loss {:.5}", row.epoch, cfg.ldm.epochs, row.loss);
    }
    Ok(TrainStatus::Trained { new_epochs: cfg.ldm.epochs - start, epoch: cfg.ldm.epochs })
}

pub fn train_ldm(cfg: &ExperimentConfig) -> Result<TrainStatus> {
    let paths = RunPaths::new(cfg);
    write_config_snapshot(cfg, &paths)?;
    train_ldm_at(cfg, cfg.offset_noise, &paths.ldm_ckpt(), &paths.log("ldm_loss.csv"))
}

// ----------------------------------------------------------------- sample

/// Written next to sampled images: which artifacts and settings made them.
pub const PROVENANCE_FILE: &str = "sampling.json";

/// A named image to sample from; `name` is the output file stem.
pub struct SampleInput {
    pub name: String,
    pub cxr: GrayImage,
}

pub struct SampleRequest<'a> {
    pub inputs: &'a [SampleInput],
    pub out_dir: &'a Path,
    pub policy: ThresholdPolicy,
    pub seed: u64,
    pub ldm_ckpt: &'a Path,
    pub trace: bool,
}

/// Per-image seed: independent of batching and input order.
pub fn image_seed(seed: u64, name: &str) -> u64 {
    rng::derive_seed(seed, name, 0)
}

/// Samples one soft-tissue image per input into `out_dir/<name>.png`.
pub fn sample_images(cfg: &ExperimentConfig, req: &SampleRequest) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(cfg);
    let (compressor, comp_fp) = load_vqgan(&paths)?;
    let schedule = cfg.schedule.build()?;
    if !req.ldm_ckpt.exists() {
        bail!("no estimator checkpoint at {}; run `train --stage ldm` first", req.ldm_ckpt.display());
    }
    let ck = Checkpoint::load(req.ldm_ckpt, &device())?;
    ck.expect_kind(LDM_KIND, req.ldm_ckpt)?;
    let found = ck.fingerprint("compressor").unwrap_or_default();
    if found != comp_fp {
        return Err(bonesup_core::Error::FingerprintMismatch {
            what: format!("compressor used to train {}", req.ldm_ckpt.display()),
            expected: comp_fp,
            found: found.to_string(),
        }
        .into());
    }
    let (estimator, latent_scale) = load_estimator(&ck, req.ldm_ckpt, &schedule, &device())?;
    let sampler =
        SoftTissueSampler { compressor: &compressor, estimator: &estimator, schedule: &schedule, latent_scale };
    std::fs::create_dir_all(req.out_dir)?;
    let provenance = serde_json::json!({
        "fingerprints": &ck.meta.fingerprints,
        "estimator_checkpoint": req.ldm_ckpt,
        "estimator_epoch": ck.meta.epoch,
        "policy": req.policy,
        "seed": req.seed,
    });
    std::fs::write(req.out_dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&provenance)?)?;
    let batch = if req.trace { 1 } else { cfg.sampling.batch_size };
    let mut written = Vec::with_capacity(req.inputs.len());
    for chunk in req.inputs.chunks(batch) {
        let cxrs: Vec<&GrayImage> = chunk.iter().map(|i| &i.cxr).collect();
        let seeds: Vec<u64> = chunk.iter().map(|i| image_seed(req.seed, &i.name)).collect();
        let mut trace = SamplerTrace::default();
        let outs = sampler.sample(&cxrs, &req.policy, &seeds, req.trace.then_some(&mut trace))?;
        for (input, img) in chunk.iter().zip(outs) {
            let path = req.out_dir.join(format!("{}.png", input.name));
            img.save_normalized(&path)?;
            if req.trace {
                trace.write_csv(&req.out_dir.join(format!("{}.trace.csv", input.name)))?;
            }
            written.push(path);
        }
        info!("sampled {}/{}", written.len(), req.inputs.len());
    }
    Ok(written)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true))
        .collect();
    v.sort();
    Ok(v)
}

/// Loads sampling inputs from a PNG file or a directory of PNGs. Images are
/// taken as already preprocessed unless `preprocess` is set.
pub fn load_inputs(cfg: &ExperimentConfig, input: &Path, preprocess: bool) -> Result<Vec<SampleInput>> {
    let files = if input.is_dir() { png_files(input)? } else { vec![input.to_path_buf()] };
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    files
        .iter()
        .map(|f| {
            let cxr = if preprocess {
                bonesup_core::data::preprocess(&GrayImage::load_png(f)?, &cfg.data.preprocess)?
            } else {
                GrayImage::load_normalized(f)?
            };
            let name = f.file_stem().and_then(|s| s.to_str()).context("bad file name")?.to_string();
            Ok(SampleInput { name, cxr })
        })
        .collect()
}

pub fn split_inputs(cfg: &ExperimentConfig, split: Split) -> Result<Vec<SampleInput>> {
    let manifest = load_manifest(&RunPaths::new(cfg))?;
    manifest
        .split(split)
        .map(|e| Ok(SampleInput { name: e.id.clone(), cxr: GrayImage::load_normalized(&manifest.root.join(&e.cxr))? }))
        .collect()
}

// --------------------------------------------------------------- evaluate

pub fn extractor() -> Result<SeededConvExtractor> {
    Ok(SeededConvExtractor::new(DType::F32, &device())?)
}

/// Where predictions come from.
pub enum Predictions<'a> {
    Dir(&'a Path),
    /// Use the radiograph itself as the soft-tissue estimate.
    IdentityBaseline,
}

/// Evaluation rows plus the mean absolute luminance error per image.
pub struct Evaluation {
    pub report: MetricReport,
    pub luminance_error: MeanStd,
    /// Dataset fingerprint plus the predictions' sampling record, if any.
    pub provenance: serde_json::Value,
}

pub fn evaluate(cfg: &ExperimentConfig, preds: Predictions, split: Split) -> Result<Evaluation> {
    let manifest = load_manifest(&RunPaths::new(cfg))?;
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        bail!("the {} split is empty", split.name());
    }
    if let Predictions::Dir(dir) = preds {
        let wanted: std::collections::HashSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        let missing: Vec<&str> =
            entries.iter().map(|e| e.id.as_str()).filter(|id| !dir.join(format!("{id}.png")).exists()).collect();
        let extra: Vec<String> = png_files(dir)?
            .iter()
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
            .filter(|s| !wanted.contains(s.as_str()))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            bail!(
                "predictions in {} do not match the {} split\n  missing predictions: {:?}\n  unexpected files: {:?}",
                dir.display(),
                split.name(),
                missing,
                extra
            );
        }
    }
    let ext = extractor()?;
    let mut rows: Vec<ImageMetrics> = Vec::with_capacity(entries.len());
    let mut lum = Vec::with_capacity(entries.len());
    for e in entries {
        let pair = manifest.load_pair(e)?;
        let pred = match preds {
            Predictions::Dir(dir) => GrayImage::load_normalized(&dir.join(format!("{}.png", e.id)))?,
            Predictions::IdentityBaseline => pair.cxr.clone(),
        };
        rows.push(evaluate_pair(&e.id, &pair.tissue, &pred, pair.bone.as_ref(), &pair.cxr, &ext)?);
        lum.push((pred.to_unit_range().mean() - pair.tissue.to_unit_range().mean()).abs());
    }
    let sampling = match preds {
        Predictions::Dir(dir) => std::fs::read_to_string(dir.join(PROVENANCE_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok()),
        Predictions::IdentityBaseline => Some(serde_json::json!("identity baseline")),
    };
    Ok(Evaluation {
        report: MetricReport::from_rows(ext.name(), rows)?,
        luminance_error: MeanStd::of(&lum),
        provenance: serde_json::json!({
            "dataset": manifest.fingerprint(),
            "split": split.name(),
            "predictions": sampling,
        }),
    })
}

pub fn write_report(eval: &Evaluation, dir: &Path) -> Result<()> {
    eval.report.write_csv(&dir.join("metrics.csv"))?;
    eval.report.write_summary_json(&dir.join("summary.json"))?;
    std::fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&eval.provenance)?)?;
    Ok(())
}

// ----------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub offset_noise: String,
    pub threshold: String,
    pub bsr: f64,
    pub bsr_std: f64,
    pub mse: f64,
    pub mse_std: f64,
    pub psnr: f64,
    pub psnr_std: f64,
    pub lpips: f64,
    pub lpips_std: f64,
    pub luminance_error: f64,
    pub fingerprint: String,
}

impl AblationRow {
    fn new(offset: &str, threshold: &str, e: &Evaluation, fingerprint: String) -> Self {
        let r = &e.report;
        Self {
            offset_noise: offset.into(),
            threshold: threshold.into(),
            bsr: r.bsr.mean,
            bsr_std: r.bsr.std,
            mse: r.mse.mean,
            mse_std: r.mse.std,
            psnr: r.psnr.mean,
            psnr_std: r.psnr.std,
            lpips: r.lpips.mean,
            lpips_std: r.lpips.std,
            luminance_error: e.luminance_error.mean,
            fingerprint,
        }
    }
}

fn ablation_dir(paths: &RunPaths) -> PathBuf {
    paths.root.join("ablation")
}

fn ldm_epoch(path: &Path) -> Result<usize> {
    Ok(Checkpoint::load(path, &device())?.meta.epoch)
}

/// Samples the test split with `policy` and evaluates it, reusing a stored
/// result when its fingerprint matches.
fn run_cell(
    cfg: &ExperimentConfig,
    cell_dir: &Path,
    ldm: &Path,
    policy: ThresholdPolicy,
    labels: (&str, &str),
) -> Result<AblationRow> {
    let result = cell_dir.join("result.json");
    let fp = fingerprint_of(&(
        fingerprint_of(&cfg.compressor),
        fingerprint_of(&cfg.estimator),
        ldm_epoch(ldm)?,
        ldm.display().to_string(),
        policy,
        cfg.sampling.seed,
        cfg.schedule,
    ));
    if let Ok(text) = std::fs::read_to_string(&result) {
        if let Ok(row) = serde_json::from_str::<AblationRow>(&text) {
            if row.fingerprint == fp {
                info!("cell {}/{} already evaluated", labels.0, labels.1);
                return Ok(row);
            }
        }
    }
    let inputs = split_inputs(cfg, Split::Test)?;
    let samples = cell_dir.join("samples");
    sample_images(
        cfg,
        &SampleRequest {
            inputs: &inputs,
            out_dir: &samples,
            policy,
            seed: cfg.sampling.seed,
            ldm_ckpt: ldm,
            trace: false,
        },
    )?;
    let eval = evaluate(cfg, Predictions::Dir(&samples), Split::Test)?;
    write_report(&eval, cell_dir)?;
    let row = AblationRow::new(labels.0, labels.1, &eval, fp);
    std::fs::write(&result, serde_json::to_string_pretty(&row)?)?;
    Ok(row)
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = Vec::new();
    {
        let mut w = csv_writer(&mut text);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

/// The 8-cell offset-noise x thresholding grid. The offset-on estimator is
/// the run's main estimator; the offset-off one is trained alongside it.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let paths = RunPaths::new(cfg);
    let dir = ablation_dir(&paths);
    if cfg.offset_noise.lambda <= 0.0 {
        bail!("the ablation needs offset_noise.lambda > 0 for its offset-on cells");
    }
    train_ldm(cfg)?;
    let off_ckpt = dir.join("ldm_offset_off.ckpt");
    train_ldm_at(cfg, OffsetNoiseConfig { lambda: 0.0 }, &off_ckpt, &dir.join("ldm_offset_off_loss.csv"))?;
    let mut rows = Vec::with_capacity(8);
    for (label, ckpt) in [("off", off_ckpt.clone()), ("on", paths.ldm_ckpt())] {
        for kind in ThresholdKind::ALL {
            let policy = ThresholdPolicy { kind, ..cfg.threshold };
            let cell = dir.join(format!("{label}_{}", kind.name()));
            rows.push(run_cell(cfg, &cell, &ckpt, policy, (label, kind.name()))?);
            info!("cell offset={label} threshold={}: mse {:.5}", kind.name(), rows.last().unwrap().mse);
        }
    }
    write_rows(&rows, &dir.join("ablation.csv"))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub value: f64,
    pub bsr: f64,
    pub mse: f64,
    pub psnr: f64,
    pub lpips: f64,
    pub luminance_error: f64,
}

/// One trained-and-evaluated configuration per sweep value.
pub fn sweep(cfg: &ExperimentConfig, sweep: &Sweep) -> Result<Vec<SweepRow>> {
    let paths = RunPaths::new(cfg);
    let dir = paths.root.join("sweeps").join(sweep.key.name());
    let mut rows = Vec::new();
    for &v in &sweep.values {
        let cell = dir.join(format!("{v}"));
        let mut policy = cfg.threshold;
        let ldm = match sweep.key {
            SweepKey::Lambda => {
                let ckpt = cell.join("ldm.ckpt");
                train_ldm_at(cfg, OffsetNoiseConfig { lambda: v }, &ckpt, &cell.join("ldm_loss.csv"))?;
                ckpt
            }
            SweepKey::Omega | SweepKey::Intercept => {
                if sweep.key == SweepKey::Omega {
                    policy.omega = v;
                } else {
                    policy.intercept = v;
                }
                policy.kind = ThresholdKind::Temporal;
                policy.validate()?;
                train_ldm(cfg)?;
                paths.ldm_ckpt()
            }
        };
        let row = run_cell(cfg, &cell, &ldm, policy, (sweep.key.name(), &v.to_string()))?;
        rows.push(SweepRow {
            key: sweep.key.name().into(),
            value: v,
            bsr: row.bsr,
            mse: row.mse,
            psnr: row.psnr,
            lpips: row.lpips,
            luminance_error: row.luminance_error,
        });
    }
    write_rows(&rows, &dir.join("sweep.csv"))?;
    Ok(rows)
}

// -------------------------------------------------------------------- psd

/// Power spectrum of the PNGs in `input` (read into [-1, 1]), or of
/// `noise` i.i.d. Gaussian images of the configured size when given.
pub fn psd(cfg: &ExperimentConfig, input: Option<&Path>, noise: Option<usize>, bins: usize) -> Result<PsdProfile> {
    let images: Vec<GrayImage> = match (input, noise) {
        (Some(dir), None) => {
            png_files(dir)?.iter().map(|p| GrayImage::load_normalized(p)).collect::<bonesup_core::Result<_>>()?
        }
        (None, Some(n)) => {
            let s = cfg.data.preprocess.target_size;
            (0..n)
                .map(|i| {
                    let mut r = rng::seeded(rng::derive_seed(cfg.sampling.seed, "psd-noise", i as u64), 0);
                    GrayImage::new(s, s, rng::gaussian_vec(&mut r, s * s))
                })
                .collect::<bonesup_core::Result<_>>()?
        }
        _ => bail!("give exactly one of --input or --noise"),
    };
    Ok(psd_profile(&images, bins)?)
}
