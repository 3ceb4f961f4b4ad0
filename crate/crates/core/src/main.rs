use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use cdseg::domain::GridShape;
use cdseg::eval::{disentanglement_report, evaluate_subsets, ProbeConfig};
use cdseg::experiments::{ablate, sweep};
use cdseg::model::{Checkpoint, Model};
use cdseg::phantom::dataset::{hex_digest, MANIFEST};
use cdseg::phantom::{generate_dataset, Dataset, PhantomConfig};
use cdseg::report;
use cdseg::train::{export_inference, fit, TrainConfig, LAST};

const RUN_MANIFEST: &str = "run_manifest.json";
const INFERENCE: &str = "inference.ckpt";
const HEATMAP_CASES: usize = 4;

#[derive(Parser)]
#[command(name = "cdseg", version, about = "Causality-guided disentangled segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Generate {
        /// PhantomConfig JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        grid_shape: Option<GridShape>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model; resumes from `<out>/last.ckpt` unless --overwrite.
    Train(TrainArgs),
    /// Missing-modality grid, disentanglement report and heatmaps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the counterfactual probe.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        overwrite: bool,
    },
    /// The six-row component ladder.
    Ablate(MultiArgs),
    /// One-at-a-time lambda sensitivity.
    Sweep(MultiArgs),
    /// Render `<out>/report.md` from the artifacts in `<out>`.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; falls back to `dataset_path` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    grid_shape: Option<GridShape>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct MultiArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

/// Failures caused by the caller (flags, configs, paths) rather than by the run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    /// `sha256("blob <len>\0" + manifest.json)`.
    dataset_manifest_hash: Option<String>,
    seed: u64,
    started_unix: u64,
    finished_unix: Option<u64>,
    outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn start(command: &str, config: &impl Serialize, data: Option<&Path>, seed: u64, out: &Path) -> Result<Self> {
        let m = RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            dataset_manifest_hash: data.map(blob_hash).transpose()?,
            seed,
            started_unix: now(),
            finished_unix: None,
            outputs: Vec::new(),
        };
        m.write(out)?;
        Ok(m)
    }

    fn finish(mut self, out: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = Some(now());
        self.outputs = outputs;
        self.write(out)
    }

    fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        report::write_json(&out.join(RUN_MANIFEST), self)?;
        Ok(())
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn blob_hash(data: &Path) -> Result<String> {
    let path = data.join(MANIFEST);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex_digest(&h.finalize()))
}

/// Refuses to write into `out` when any of `owned` already exists there.
fn check_out(out: &Path, owned: &[&str], overwrite: bool) -> Result<()> {
    if !overwrite && owned.iter().any(|n| out.join(n).exists()) {
        return Err(invalid(cdseg::Error::OutputNotEmpty(out.to_path_buf())));
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.join(MANIFEST).exists() {
        return Err(invalid(cdseg::Error::MissingPath(path.join(MANIFEST))));
    }
    Ok(())
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, serde_json::Value)> {
    let Some(path) = path else {
        return Ok((T::default(), serde_json::Value::Null));
    };
    if !path.exists() {
        return Err(invalid(cdseg::Error::MissingPath(path.to_path_buf())));
    }
    let text = fs::read_to_string(path).map_err(invalid)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let cfg = serde_json::from_value(raw.clone()).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((cfg, raw))
}

/// Resolves the training config and dataset directory from the flags.
fn resolve_train(args: &TrainArgs) -> Result<(TrainConfig, PathBuf)> {
    let (mut cfg, raw): (TrainConfig, _) = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(invalid)?;
    let data = args
        .data
        .clone()
        .or_else(|| cfg.dataset_path.clone())
        .ok_or_else(|| invalid("no dataset: pass --data or set dataset_path"))?;
    require_dir(&data)?;
    cfg.dataset_path = Some(data.clone());
    match args.grid_shape {
        Some(g) => cfg.grid_shape = g,
        // An unspecified grid follows the dataset.
        None if raw.get("grid_shape").is_none() => {
            cfg.grid_shape = cdseg::phantom::read_manifest(&data)?.config.grid_shape
        }
        None => {}
    }
    cfg.validate().map_err(invalid)?;
    Ok((cfg, data))
}

fn load_dataset(data: &Path, cfg: &TrainConfig) -> Result<Dataset> {
    let ds = Dataset::load(data)?;
    if ds.grid() != cfg.grid_shape {
        return Err(invalid(format!("grid_shape {} does not match the dataset grid {}", cfg.grid_shape, ds.grid())));
    }
    Ok(ds)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed, grid_shape, overwrite } => {
            let (mut cfg, _): (PhantomConfig, _) = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(g) = grid_shape {
                cfg.grid_shape = g;
            }
            cfg.validate().map_err(invalid)?;
            if !overwrite && out.exists() && fs::read_dir(&out)?.any(|e| e.is_ok_and(|e| e.file_name() != RUN_MANIFEST))
            {
                return Err(invalid(cdseg::Error::OutputNotEmpty(out)));
            }
            let manifest = RunManifest::start("generate", &cfg, None, cfg.master_seed, &out)?;
            generate_dataset(&cfg, &out, true)?;
            let mut m = manifest;
            m.dataset_manifest_hash = Some(blob_hash(&out)?);
            m.finish(&out, vec![out.join(MANIFEST)])
        }
        Command::Train(args) => {
            let (cfg, data) = resolve_train(&args)?;
            let out = &args.out;
            let resume = !args.overwrite && out.join(LAST).exists();
            let manifest = RunManifest::start("train", &cfg, Some(&data), cfg.seed, out)?;
            let ds = load_dataset(&data, &cfg)?;
            let outcome = fit(&cfg, &ds, out, resume)?;
            let export = out.join(INFERENCE);
            export_inference(outcome.checkpoint(), &export)?;
            let mut outputs = vec![outcome.last.clone()];
            outputs.extend(outcome.best.clone());
            outputs.push(export);
            manifest.finish(out, outputs)
        }
        Command::Eval { checkpoint, data, out, seed, overwrite } => {
            if !checkpoint.exists() {
                return Err(invalid(cdseg::Error::MissingPath(checkpoint)));
            }
            require_dir(&data)?;
            check_out(&out, &[report::GRID_JSON], overwrite)?;
            let probe = ProbeConfig { seed, ..ProbeConfig::default() };
            let manifest = RunManifest::start(
                "eval",
                &serde_json::json!({ "checkpoint": checkpoint, "data": data, "probe": probe }),
                Some(&data),
                seed,
                &out,
            )?;
            let model = Model::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let ds = Dataset::load(&data)?;
            let grid = evaluate_subsets(&model, &ds.test)?;
            report::write_grid(&out, &grid)?;
            let mut outputs =
                vec![out.join(report::GRID_JSON), out.join("subset_grid.csv"), out.join("subset_grid.md")];
            if ds.test.len() < 2 {
                log::warn!("test split has {} case(s); the disentanglement report needs two", ds.test.len());
            } else if model.has_training_branches() {
                let r = disentanglement_report(&model, &ds.train, &ds.test, &probe)?;
                report::write_json(&out.join(report::DISENTANGLEMENT_JSON), &r)?;
                outputs.push(out.join(report::DISENTANGLEMENT_JSON));
            } else {
                log::warn!("{} is an inference export; skipping the disentanglement report", checkpoint.display());
            }
            outputs.extend(report::write_heatmaps(&model, &ds.test, &out, HEATMAP_CASES)?);
            manifest.finish(&out, outputs)
        }
        Command::Ablate(args) | Command::Sweep(args) if args.seeds == 0 => Err(invalid("--seeds must be at least 1")),
        Command::Ablate(args) => {
            let (cfg, data) = resolve_train(&args.train)?;
            let out = &args.train.out;
            check_out(out, &[report::ABLATION_JSON], args.train.overwrite)?;
            let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| cfg.seed + i).collect();
            let manifest = RunManifest::start("ablate", &cfg, Some(&data), cfg.seed, out)?;
            let ds = load_dataset(&data, &cfg)?;
            let table = ablate(&cfg, &ds, &seeds, out)?;
            report::write_ablation(out, &table)?;
            manifest.finish(out, ["ablation.json", "ablation.csv", "ablation.md"].map(|n| out.join(n)).to_vec())
        }
        Command::Sweep(args) => {
            let (cfg, data) = resolve_train(&args.train)?;
            let out = &args.train.out;
            check_out(out, &[report::SWEEP_JSON], args.train.overwrite)?;
            let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| cfg.seed + i).collect();
            let manifest = RunManifest::start("sweep", &cfg, Some(&data), cfg.seed, out)?;
            let ds = load_dataset(&data, &cfg)?;
            let table = sweep(&cfg, &ds, &seeds, out)?;
            report::write_sweep(out, &table)?;
            manifest.finish(out, ["sweep.json", "sweep.csv", "sweep.md"].map(|n| out.join(n)).to_vec())
        }
        Command::Report { out } => {
            if !out.is_dir() {
                return Err(invalid(cdseg::Error::MissingPath(out)));
            }
            let (text, missing) = report::render_report(&out)?;
            report::write_text(&out.join(report::REPORT_MD), &text)?;
            if !missing.is_empty() {
                log::warn!("missing artifacts: {}", missing.join(", "));
            }
            println!("{}", out.join(report::REPORT_MD).display());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some()
            || e.downcast_ref::<cdseg::Error>().is_some_and(cdseg::Error::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
