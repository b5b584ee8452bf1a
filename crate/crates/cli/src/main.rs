use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use bonesup_cli::commands::{self, Predictions, SampleRequest, TrainStatus};
use bonesup_cli::config::{ExperimentConfig, Profile, Sweep};
use bonesup_core::data::{PrepareOutcome, Split};
use bonesup_core::sampler::ThresholdKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bonesup", version, about = "Bone suppression in chest radiographs with latent diffusion")]
struct Cli {
    /// TOML config; missing keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Profile::Full)]
    profile: Profile,

    /// Override one config value, e.g. `--set ldm.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Vqgan,
    Ldm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Score the radiograph itself as the soft-tissue prediction.
    Identity,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess raw pairs (or generate synthetic ones) and split them.
    Prepare {
        /// Directory with cxr/, tissue/ and optionally bone/ subdirectories.
        raw: Option<PathBuf>,
        /// Generate this many synthetic pairs instead of reading raw data.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Output image side length.
        #[arg(long)]
        size: Option<usize>,
        /// Overwrite a dataset prepared with a different config.
        #[arg(long)]
        force: bool,
    },
    /// Train the compressor (vqgan) or the noise estimator (ldm).
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
    },
    /// Generate soft-tissue images.
    Sample {
        /// PNG file or directory; defaults to the prepared split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Run the preprocessing pipeline on `--input` images first.
        #[arg(long)]
        preprocess: bool,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threshold: Option<ThresholdKind>,
        /// Write `<name>.trace.csv` with one row per reverse step.
        #[arg(long)]
        trace: bool,
    },
    /// Score predictions against the prepared ground truth.
    Evaluate {
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the offset-noise x thresholding grid, or a hyperparameter sweep.
    Ablate {
        /// `lambda=...`, `omega=...` or `b=...` with comma-separated values.
        #[arg(long)]
        sweep: Option<Sweep>,
    },
    /// Radially averaged power spectrum of a set of images.
    Psd {
        #[arg(long, conflicts_with = "noise", required_unless_present = "noise")]
        input: Option<PathBuf>,
        /// Use this many white-noise images instead.
        #[arg(long)]
        noise: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), cli.profile)?;
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {o:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let paths = commands::RunPaths::new(&cfg);
    match cli.command {
        Command::Prepare { raw, synthetic, size, force } => {
            if let Some(dir) = raw {
                cfg.data.raw_dir = Some(dir);
                cfg.data.synthetic_count = 0;
            }
            if let Some(n) = synthetic {
                cfg.data.synthetic_count = n;
            }
            if let Some(s) = size {
                cfg.data.preprocess.target_size = s;
            }
            cfg.data.preprocess.validate()?;
            match commands::prepare(&cfg, force)? {
                PrepareOutcome::UpToDate => println!("dataset at {} is up to date", paths.data().display()),
                PrepareOutcome::Written(n) => println!("prepared {n} pairs in {}", paths.data().display()),
            }
        }
        Command::Train { stage } => {
            let status = match stage {
                Stage::Vqgan => commands::train_vqgan(&cfg)?,
                Stage::Ldm => commands::train_ldm(&cfg)?,
            };
            match status {
                TrainStatus::Trained { new_epochs, epoch } => {
                    println!("trained {new_epochs} epochs (now at epoch {epoch})")
                }
                TrainStatus::AlreadyDone { epoch } => println!("already trained to epoch {epoch}"),
            }
        }
        Command::Sample { input, split, preprocess, output, seed, threshold, trace } => {
            let inputs = match &input {
                Some(p) => commands::load_inputs(&cfg, p, preprocess)?,
                None => commands::split_inputs(&cfg, split)?,
            };
            let mut policy = cfg.threshold;
            if let Some(k) = threshold {
                policy.kind = k;
            }
            policy.validate()?;
            let out = output.unwrap_or_else(|| paths.samples(policy.kind.name()));
            let ldm = paths.ldm_ckpt();
            let written = commands::sample_images(
                &cfg,
                &SampleRequest {
                    inputs: &inputs,
                    out_dir: &out,
                    policy,
                    seed: seed.unwrap_or(cfg.sampling.seed),
                    ldm_ckpt: &ldm,
                    trace,
                },
            )?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Evaluate { predictions, baseline, split, output } => {
            let (preds, tag) = match (&predictions, baseline) {
                (Some(p), _) => (Predictions::Dir(p), "predictions".to_string()),
                (None, Some(Baseline::Identity)) => (Predictions::IdentityBaseline, "identity".to_string()),
                (None, None) => bail!("give --predictions DIR or --baseline identity"),
            };
            let eval = commands::evaluate(&cfg, preds, split)?;
            let out = output.unwrap_or_else(|| paths.reports(&format!("{tag}_{}", split.name())));
            std::fs::create_dir_all(&out)?;
            commands::write_report(&eval, &out)?;
            for line in eval.report.summary_lines() {
                println!("{line}");
            }
            println!("luminance error: {}", eval.luminance_error.format(4));
            println!("report written to {}", out.display());
        }
        Command::Ablate { sweep } => match sweep {
            Some(s) => {
                let rows = commands::sweep(&cfg, &s)?;
                println!("{:>8} {:>8} {:>10} {:>8} {:>8}", s.key.name(), "bsr", "mse", "psnr", "lpips");
                for r in rows {
                    println!("{:>8} {:>8.4} {:>10.6} {:>8.3} {:>8.4}", r.value, r.bsr, r.mse, r.psnr, r.lpips);
                }
            }
            None => {
                let rows = commands::ablate(&cfg)?;
                println!(
                    "{:>6} {:>9} {:>8} {:>10} {:>8} {:>8} {:>10}",
                    "offset", "threshold", "bsr", "mse", "psnr", "lpips", "luminance"
                );
                for r in rows {
                    println!(
                        "{:>6} {:>9} {:>8.4} {:>10.6} {:>8.3} {:>8.4} {:>10.6}",
                        r.offset_noise, r.threshold, r.bsr, r.mse, r.psnr, r.lpips, r.luminance_error
                    );
                }
            }
        },
        Command::Psd { input, noise, bins, output } => {
            let profile = commands::psd(&cfg, input.as_deref(), noise, bins.unwrap_or(cfg.evaluate.psd_bins))?;
            let out = output.unwrap_or_else(|| paths.reports("psd.csv"));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            profile.write_csv(&out)?;
            println!("power spectrum of {} images written to {}", profile.samples, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
