//! Subcommands of the `evipar` binary.
//!
//! - `synth`: generate a synthetic dataset from a TOML task spec.
//! - `train`: train a model from a TOML run config.
//! - `eval`: score a checkpoint on a dataset split.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use evipar_autodiff::{checkpoint, AutodiffError};
use evipar_core::config::{Ablation, Components, RunConfig};
use evipar_core::eval::{attention_csv, evaluate, predict, predictions_csv, RejectionLevel};
use evipar_core::features::{load_dataset, save_dataset};
use evipar_core::metrics::default_coverages;
use evipar_core::synth::{generate_dataset, Split, TaskSpec};
use evipar_core::trainer::train;
use evipar_core::{Error, Result};
use serde::Serialize;

pub const THREADS_ENV: &str = "EVIPAR_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.evip";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const TIMINGS_FILE: &str = "timings.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REJECTION_FILE: &str = "rejection.csv";
pub const ATTENTION_FILE: &str = "attention.csv";

#[derive(Debug, Parser)]
#[command(name = "evipar", version, about = "Evidential multi-attribute recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Task spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `data.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides `data.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `curriculum.total_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Component preset, 1 = plain BCE through 7 = full model.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=7))]
    pub ablation_row: Option<u8>,
    #[arg(long)]
    pub no_spm: bool,
    #[arg(long)]
    pub no_cl: bool,
    #[arg(long)]
    pub no_awr: bool,
    #[arg(long)]
    pub no_raer: bool,
    #[arg(long)]
    pub no_edl: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run config describing the model (the run's resolved `config.toml`).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Coverage levels of the rejection curve, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub reject: Option<Vec<f64>>,
    /// Rank samples by mean vacuity instead of ranking single decisions.
    #[arg(long)]
    pub sample_rejection: bool,
    /// Also write the attribute attention map.
    #[arg(long)]
    pub attmap: bool,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Numerical(_) | Error::Autodiff(AutodiffError::NonPositiveLog { .. }) => 4,
        _ => 3,
    }
}

/// Caps the rayon pool at `EVIPAR_THREADS` workers when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(THREADS_ENV, e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::config(what, format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let spec = TaskSpec::from_toml(&read_text(&args.spec, "spec")?)?;
    let dataset = generate_dataset(&spec)?;
    save_dataset(&dataset, &args.out)?;
    log::info!(
        "wrote {} train / {} val / {} test samples to {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        args.out.display()
    );
    Ok(args.out.clone())
}

#[derive(Debug, Serialize)]
pub struct Artifacts {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub epoch_log: PathBuf,
    pub timings: PathBuf,
}

/// Everything needed to reproduce a run; written before training starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub components: Components,
    pub config: RunConfig,
    pub artifacts: Artifacts,
    /// Seconds since the Unix epoch when the run started.
    pub started_at: u64,
}

#[derive(Debug, Serialize)]
struct Timings {
    load_seconds: f64,
    train_seconds: f64,
    total_seconds: f64,
}

/// Resolves the config from the file and the command-line overrides.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_toml(&read_text(&args.config, "config")?)?;
    if let Some(row) = args.ablation_row {
        cfg.set_components(Components::ablation_row(row as usize).expect("row range checked"));
    }
    cfg.apply(Ablation {
        no_spm: args.no_spm,
        no_cl: args.no_cl,
        no_awr: args.no_awr,
        no_raer: args.no_raer,
        no_edl: args.no_edl,
    });
    if let Some(d) = &args.dataset {
        cfg.data.dataset = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.data.out_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.curriculum.total_epochs = e;
        cfg.curriculum.warmup_epochs = cfg.curriculum.warmup_epochs.min(e);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg = resolve_config(args)?;
    let out = cfg.data.out_dir.clone();
    let dataset = load_dataset(&cfg.data.dataset)?;
    let load_seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&out)?;

    let artifacts = Artifacts {
        dataset: cfg.data.dataset.clone(),
        out_dir: out.clone(),
        config: out.join(RESOLVED_CONFIG_FILE),
        checkpoint: out.join(CHECKPOINT_FILE),
        epoch_log: out.join(EPOCH_LOG_FILE),
        timings: out.join(TIMINGS_FILE),
    };
    write(&artifacts.config, cfg.to_toml())?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        components: cfg.components(),
        config: cfg.clone(),
        started_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        artifacts,
    };
    write(&out.join(RUN_MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;

    let mut model = cfg.build_model(dataset.input_dims())?;
    let mut log = fs::File::create(&manifest.artifacts.epoch_log)?;
    let train_start = Instant::now();
    train(&mut model, &dataset, &cfg.train_config(), |_, report| {
        writeln!(log, "{}", serde_json::to_string(report)?)?;
        Ok(())
    })?;
    checkpoint::save(&model.store, &manifest.artifacts.checkpoint)?;
    let timings = Timings {
        load_seconds,
        train_seconds: train_start.elapsed().as_secs_f64(),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    write(&manifest.artifacts.timings, serde_json::to_vec_pretty(&timings)?)?;
    log::info!("checkpoint written to {}", manifest.artifacts.checkpoint.display());
    Ok(manifest.artifacts.checkpoint)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<evipar_core::eval::EvalReport> {
    let cfg = RunConfig::from_toml(&read_text(&args.config, "config")?)?;
    let split: Split = args.split.parse()?;
    let dataset = load_dataset(&args.dataset)?;
    let mut model = cfg.build_model(dataset.input_dims())?;
    let loaded = checkpoint::load(&args.checkpoint)?;
    model.load_params(&loaded)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", split.as_str())));
    }
    let coverages = args.reject.clone().unwrap_or_else(default_coverages);
    let level = if args.sample_rejection {
        RejectionLevel::Sample
    } else {
        RejectionLevel::Decision
    };
    let preds = predict(&model, &dataset.text, samples, args.attmap)?;
    let report = evaluate(&dataset, samples, &preds, &coverages, level)?;

    fs::create_dir_all(&args.out)?;
    write(&args.out.join(METRICS_FILE), serde_json::to_vec_pretty(&report.metrics)?)?;
    write(&args.out.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    write(&args.out.join(PREDICTIONS_FILE), predictions_csv(&dataset, samples, &preds))?;
    write(&args.out.join(REJECTION_FILE), report.rejection.to_csv())?;
    if args.attmap {
        write(&args.out.join(ATTENTION_FILE), attention_csv(&dataset, &preds)?)?;
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "split {} samples {} mA {:.4} Acc {:.4} Prec {:.4} Rec {:.4} F1 {:.4}",
        split.as_str(),
        report.samples,
        report.metrics.ma,
        report.metrics.accuracy,
        report.metrics.precision,
        report.metrics.recall,
        report.metrics.f1
    );
    println!(
        "mean vacuity {:.4} AUROC(u -> occluded) {} AUROC(u -> error) {}",
        report.mean_vacuity,
        fmt(report.auroc_occluded),
        fmt(report.auroc_error)
    );
    Ok(report)
}
