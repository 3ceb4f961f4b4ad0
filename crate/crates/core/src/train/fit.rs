use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{evaluate_subsets, SubsetGrid};
use crate::losses::LossBundle;
use crate::model::{Checkpoint, CheckpointKind, Model};
use crate::phantom::{Dataset, MultimodalSample};
use crate::rng::{self, tag};

use super::config::TrainConfig;
use super::mask::sample_modality_mask;
use super::optim::Adam;
use super::step::{draw_eps, train_step, BatchItem};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";
pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub dis_share_causal: f64,
    pub masks: Vec<String>,
}

/// One line of the validation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean Dice over the fifteen subsets and three regions.
    pub val_mean_dice: f64,
    /// Whole-tumour Dice with every modality present.
    pub val_full_wt: f64,
    pub grid: SubsetGrid,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub last: PathBuf,
    /// Absent when no validation ran (zero epochs).
    pub best: Option<PathBuf>,
    pub best_val: Option<f64>,
    pub final_val: Option<ValRecord>,
    pub steps: u64,
}

impl FitOutcome {
    /// The checkpoint to use downstream: best if any, otherwise last.
    pub fn checkpoint(&self) -> &Path {
        self.best.as_deref().unwrap_or(&self.last)
    }
}

/// Optimizer steps per epoch for `n` training cases.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    if full == 0 {
        return usize::from(n > 0);
    }
    full + usize::from(n % batch_size > 1)
}

/// Seeded batch order of one epoch. A trailing single sample joins the
/// previous batch so every batch holds at least two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("at least one batch").extend(tail);
    }
    batches
}

fn meta(cfg: &TrainConfig, epoch: usize, step: u64, best_val: Option<f64>) -> serde_json::Value {
    json!({ "train_config": cfg, "epoch": epoch, "step": step, "best_val": best_val })
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Keeps the log lines whose `key` value is below `limit`.
fn truncate_log(path: &Path, key: &str, limit: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        if v.get(key).and_then(|s| s.as_u64()).is_some_and(|s| s < limit) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<StepRecord>> {
    read_jsonl(path)
}

pub fn read_val_log(path: &Path) -> Result<Vec<ValRecord>> {
    read_jsonl(path)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn validate(model: &Model, val: &[MultimodalSample], epoch: usize, step: u64) -> Result<ValRecord> {
    let grid = evaluate_subsets(model, val)?;
    let full = grid.row(crate::domain::Availability::ALL).map_or(0.0, |r| r.wt);
    Ok(ValRecord { epoch, step, val_mean_dice: grid.macro_avg, val_full_wt: full, grid })
}

/// Trains on `data` into `out`. With `resume`, continues from `out/last.ckpt`
/// when it exists.
pub fn fit(cfg: &TrainConfig, data: &Dataset, out: &Path, resume: bool) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.grid() != cfg.grid_shape {
        return Err(Error::config(
            "grid_shape",
            format!("dataset grid is {}, config asks for {}", data.grid(), cfg.grid_shape),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train_log, val_log) = (out.join(TRAIN_LOG), out.join(VAL_LOG));
    let (last_path, best_path) = (out.join(LAST), out.join(BEST));

    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(&model.params, cfg.weight_decay);
    let mut start_epoch = 0;
    let mut best_val: Option<f64> = None;

    if resume && last_path.exists() {
        let ckpt = Checkpoint::load(&last_path)?;
        let saved: TrainConfig = serde_json::from_value(ckpt.meta["train_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no readable train_config: {e}")))?;
        if saved != *cfg {
            return Err(Error::Checkpoint("cannot resume: training config differs from the checkpoint's".into()));
        }
        model.load_params(&ckpt)?;
        let step = ckpt.meta["step"].as_u64().unwrap_or(0);
        opt.restore(&model.params, &ckpt, step)?;
        start_epoch = ckpt.meta["epoch"].as_u64().unwrap_or(0) as usize;
        best_val = ckpt.meta["best_val"].as_f64();
        truncate_log(&train_log, "step", step + 1)?;
        truncate_log(&val_log, "epoch", start_epoch as u64 + 1)?;
        log::info!("resuming at epoch {start_epoch}, step {step}");
    } else {
        for p in [&train_log, &val_log, &last_path, &best_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }

    let save =
        |model: &Model, opt: &Adam, path: &Path, epoch: usize, best: Option<f64>, with_opt: bool| -> Result<()> {
            let mut ckpt = model.to_checkpoint(CheckpointKind::Full, meta(cfg, epoch, opt.step, best));
            if with_opt {
                ckpt.tensors.extend(opt.state_tensors(&model.params));
            }
            ckpt.save(path)
        };

    if cfg.epochs == 0 {
        save(&model, &opt, &last_path, 0, None, true)?;
        return Ok(FitOutcome { last: last_path, best: None, best_val: None, final_val: None, steps: 0 });
    }

    let n = data.train.len();
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut final_val = None;
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let mut mask_rng = rng::stream(cfg.seed, &[tag::MASK, epoch as u64]);
        let mut epoch_total = 0.0;
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let step = opt.step;
            let items: Vec<BatchItem<'_>> = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let avail = sample_modality_mask(cfg.dropout_p, &mut mask_rng);
                    BatchItem::new(&data.train[i], avail, draw_eps(cfg.seed, step, slot, cfg.model.bias_dim))
                })
                .collect();
            let lr = cfg.lr_at(step as usize, total_steps);
            let outcome = train_step(&mut model, &mut opt, &items, cfg, lr)?;
            epoch_total += outcome.bundle.total;
            append_line(
                &train_log,
                &StepRecord {
                    epoch,
                    step,
                    lr,
                    losses: outcome.bundle,
                    dis_share_causal: outcome.dis_share_causal,
                    masks: items.iter().map(|it| it.availability.label()).collect(),
                },
            )?;
        }
        let done = epoch + 1;
        log::info!(
            "epoch {done}/{} mean total {:.4} ({:.1}s)",
            cfg.epochs,
            epoch_total / per_epoch as f64,
            started.elapsed().as_secs_f64()
        );
        if done % cfg.eval_every == 0 || done == cfg.epochs {
            let rec = validate(&model, &data.val, done, opt.step)?;
            log::info!("epoch {done}: val mean Dice {:.2}, full-modality WT {:.2}", rec.val_mean_dice, rec.val_full_wt);
            append_line(&val_log, &rec)?;
            if best_val.is_none_or(|b| rec.val_mean_dice > b) {
                best_val = Some(rec.val_mean_dice);
                save(&model, &opt, &best_path, done, best_val, false)?;
            }
            final_val = Some(rec);
        }
        save(&model, &opt, &last_path, done, best_val, true)?;
    }
    if final_val.is_none() {
        final_val = read_val_log(&val_log)?.pop();
    }
    let best = best_path.exists().then_some(best_path);
    Ok(FitOutcome { last: last_path, best, best_val, final_val, steps: opt.step })
}

/// Loads the dataset named by `cfg.dataset_path` and trains.
pub fn fit_from_config(cfg: &TrainConfig, out: &Path, resume: bool) -> Result<FitOutcome> {
    let path = cfg.dataset_path.as_ref().ok_or_else(|| Error::config("dataset_path", "not set"))?;
    if !path.exists() {
        return Err(Error::MissingPath(path.clone()));
    }
    fit(cfg, &Dataset::load(path)?, out, resume)
}

/// Writes the pruned inference checkpoint of a full checkpoint.
pub fn export_inference(full: &Path, out: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(full)?;
    if ckpt.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint(format!("{} is already an inference export", full.display())));
    }
    let pruned = ckpt.pruned();
    pruned.save(out)?;
    Ok(pruned)
}
