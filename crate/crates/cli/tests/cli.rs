use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bonesup_core::data::{Manifest, Split};
use bonesup_core::image::GrayImage;

const TINY: &str = r#"
[data]
synthetic_count = 20

[data.preprocess]
target_size = 16

[compressor]
downsample = 4
codebook_size = 16
hidden_channels = 8
res_blocks = 1
disc_channels = 4

[vqgan]
epochs = 2
adv_warmup_steps = 4

[estimator]
base_channels = 8
channel_mults = [1, 2]
latent_size = 4
attention_resolutions = [2]
res_blocks = 1
time_emb_dim = 16

[ldm]
epochs = 2

[schedule]
steps = 20

[sampling]
batch_size = 2
"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        let text = format!("output_dir = {:?}\n{TINY}", root.join("run").display().to_string());
        std::fs::write(&config, text).unwrap();
        Self { _dir: dir, root, config }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bonesup"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }

    fn trained(&self) -> &Self {
        self.ok(&["prepare"]);
        self.ok(&["train", "--stage", "vqgan"]);
        self.ok(&["train", "--stage", "ldm"]);
        self
    }
}

fn log_epochs(path: &Path) -> Vec<usize> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn synthetic_prepare_splits_500_into_400_50_50() {
    let run = Run::new();
    let out = run.ok(&["--profile", "desk", "prepare", "--synthetic", "500", "--size", "64"]);
    assert!(out.contains("prepared 500"), "{out}");
    let m = Manifest::load(&run.run_dir().join("data")).unwrap();
    let counts: Vec<usize> = Split::ALL.iter().map(|s| m.split(*s).count()).collect();
    assert_eq!(counts, vec![400, 50, 50]);
    let img = GrayImage::load_normalized(&m.root.join(&m.entries[0].cxr)).unwrap();
    assert_eq!((img.height, img.width), (64, 64));
}

#[test]
fn prepare_is_idempotent_and_guards_changes() {
    let run = Run::new();
    assert!(run.ok(&["prepare"]).contains("prepared 20"));
    assert!(run.ok(&["prepare"]).contains("up to date"));
    let err = run.fails(&["--set", "data.synthetic_seed=9", "prepare"]);
    assert!(err.contains("--force"), "{err}");
    assert!(run.ok(&["--set", "data.synthetic_seed=9", "prepare", "--force"]).contains("prepared 20"));
}

#[test]
fn prepare_reports_missing_tissue_directory() {
    let run = Run::new();
    let raw = run.root.join("raw");
    std::fs::create_dir_all(raw.join("cxr")).unwrap();
    GrayImage::filled(16, 16, 0.5).save_png16(&raw.join("cxr").join("a.png")).unwrap();
    let err = run.fails(&["prepare", raw.to_str().unwrap()]);
    assert!(err.contains("tissue"), "{err}");
}

#[test]
fn ldm_stage_requires_compressor_checkpoint() {
    let run = Run::new();
    run.ok(&["prepare"]);
    let err = run.fails(&["train", "--stage", "ldm"]);
    assert!(err.contains("train --stage vqgan"), "{err}");
}

#[test]
fn commands_before_prepare_say_what_to_run() {
    let run = Run::new();
    let err = run.fails(&["train", "--stage", "vqgan"]);
    assert!(err.contains("prepare"), "{err}");
}

#[test]
fn training_resumes_and_appends_to_the_log() {
    let run = Run::new();
    run.ok(&["prepare"]);
    run.ok(&["--set", "vqgan.epochs=1", "train", "--stage", "vqgan"]);
    let log = run.run_dir().join("logs").join("vqgan_loss.csv");
    assert_eq!(log_epochs(&log), vec![1]);
    let out = run.ok(&["--set", "vqgan.epochs=3", "train", "--stage", "vqgan"]);
    assert!(out.contains("trained 2 epochs (now at epoch 3)"), "{out}");
    assert_eq!(log_epochs(&log), vec![1, 2, 3]);
    assert!(run.ok(&["--set", "vqgan.epochs=3", "train", "--stage", "vqgan"]).contains("already trained"));
}

#[test]
fn killed_training_resumes_to_the_same_weights() {
    let straight = Run::new();
    // Enough data that an epoch outlasts the polling interval.
    let more = ["--set", "data.synthetic_count=200"];
    straight.ok(&[&more[..], &["prepare"]].concat());
    straight.ok(&[&more[..], &["--set", "vqgan.epochs=4", "train", "--stage", "vqgan"]].concat());

    let killed = Run::new();
    killed.ok(&[&more[..], &["prepare"]].concat());
    let log = killed.run_dir().join("logs").join("vqgan_loss.csv");
    let mut child = Command::new(env!("CARGO_BIN_EXE_bonesup"))
        .arg("--config")
        .arg(&killed.config)
        .args(more)
        .args(["--set", "vqgan.epochs=4", "train", "--stage", "vqgan"])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    // Kill once at least one epoch is on disk but before the run finishes.
    let ckpt = killed.run_dir().join("checkpoints").join("vqgan.ckpt");
    loop {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        if ckpt.exists() {
            child.kill().unwrap();
            child.wait().unwrap();
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    let done = bonesup_core::checkpoint::Checkpoint::load(&ckpt, &candle_core::Device::Cpu).unwrap().meta.epoch;
    assert!(done < 4, "training finished before it could be interrupted");
    killed.ok(&[&more[..], &["--set", "vqgan.epochs=4", "train", "--stage", "vqgan"]].concat());
    assert_eq!(log_epochs(&log), vec![1, 2, 3, 4]);

    // The config snapshots differ in their output paths, so compare tensors.
    let dev = candle_core::Device::Cpu;
    let ca =
        bonesup_core::checkpoint::Checkpoint::load(&straight.run_dir().join("checkpoints").join("vqgan.ckpt"), &dev)
            .unwrap();
    let cb = bonesup_core::checkpoint::Checkpoint::load(&ckpt, &dev).unwrap();
    assert_eq!(ca.meta.epoch, cb.meta.epoch);
    assert_eq!(ca.meta.step, cb.meta.step);
    let mut names: Vec<_> = ca.tensors.keys().collect();
    names.sort();
    for n in names {
        let x =
            ca.tensors[n].flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap();
        let y =
            cb.tensors[n].flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(x, y, "tensor {n} differs after kill/resume");
    }
}

#[test]
fn sampling_mirrors_inputs_and_is_deterministic() {
    let run = Run::new();
    run.trained();
    let inputs = run.root.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    let m = Manifest::load(&run.run_dir().join("data")).unwrap();
    for (i, e) in m.entries.iter().take(3).enumerate() {
        std::fs::copy(m.root.join(&e.cxr), inputs.join(format!("case{i}.png"))).unwrap();
    }
    let out1 = run.root.join("out1");
    let out2 = run.root.join("out2");
    for out in [&out1, &out2] {
        run.ok(&["sample", "--input", inputs.to_str().unwrap(), "--output", out.to_str().unwrap(), "--seed", "7"]);
    }
    for i in 0..3 {
        let name = format!("case{i}.png");
        let img = GrayImage::load_png(&out1.join(&name)).unwrap();
        assert_eq!((img.height, img.width), (16, 16));
        assert_eq!(std::fs::read(out1.join(&name)).unwrap(), std::fs::read(out2.join(&name)).unwrap());
    }
    let pngs = std::fs::read_dir(&out1)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 3);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("sampling.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 7);
    assert!(record["fingerprints"]["compressor"].is_string());
    assert!(record["fingerprints"]["schedule"].is_string());
}

#[test]
fn trace_has_one_row_per_step() {
    let run = Run::new();
    run.trained();
    let m = Manifest::load(&run.run_dir().join("data")).unwrap();
    let input = m.root.join(&m.entries[0].cxr);
    let out = run.root.join("traced");
    run.ok(&["sample", "--input", input.to_str().unwrap(), "--output", out.to_str().unwrap(), "--trace"]);
    let stem = input.file_stem().unwrap().to_str().unwrap();
    let text = std::fs::read_to_string(out.join(format!("{stem}.trace.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,t,min,max,mean,std,threshold");
    assert_eq!(lines.count(), 20);
}

#[test]
fn sampling_detects_schedule_mismatch() {
    let run = Run::new();
    run.trained();
    let err = run.fails(&["--set", "schedule.steps=30", "sample"]);
    assert!(err.contains("fingerprint mismatch"), "{err}");
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let run = Run::new();
    run.ok(&["prepare"]);
    let m = Manifest::load(&run.run_dir().join("data")).unwrap();
    let preds = run.root.join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for e in m.split(Split::Test) {
        std::fs::copy(m.root.join(&e.tissue), preds.join(format!("{}.png", e.id))).unwrap();
    }
    let report = run.root.join("report");
    let out = run.ok(&["evaluate", "--predictions", preds.to_str().unwrap(), "--output", report.to_str().unwrap()]);
    assert!(out.contains("BSR   1.000 ± 0.000"), "{out}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["bsr"]["mean"], 1.0);
    assert_eq!(summary["mse"]["mean"], 0.0);
    assert_eq!(summary["lpips"]["mean"], 0.0);
    assert!(report.join("metrics.csv").exists());
}

#[test]
fn evaluate_lists_unmatched_files() {
    let run = Run::new();
    run.ok(&["prepare"]);
    let m = Manifest::load(&run.run_dir().join("data")).unwrap();
    let preds = run.root.join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let test: Vec<_> = m.split(Split::Test).collect();
    std::fs::copy(m.root.join(&test[0].tissue), preds.join(format!("{}.png", test[0].id))).unwrap();
    std::fs::copy(m.root.join(&test[0].tissue), preds.join("stray.png")).unwrap();
    let err = run.fails(&["evaluate", "--predictions", preds.to_str().unwrap()]);
    assert!(err.contains(&test[1].id), "{err}");
    assert!(err.contains("stray"), "{err}");
}

#[test]
fn psd_of_white_noise_writes_profile() {
    let run = Run::new();
    let out = run.root.join("psd.csv");
    run.ok(&["psd", "--noise", "4", "--bins", "8", "--output", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn bad_override_is_an_error() {
    let run = Run::new();
    let err = run.fails(&["--set", "schedule.nonexistent=3", "prepare"]);
    assert!(err.contains("unknown config key"), "{err}");
}
