//! Multi-run harnesses: the component ablation ladder and the one-at-a-time
//! lambda sweep. Each training run lives in its own directory and leaves a
//! `result.json`, which later invocations reuse when the config matches.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    bias_cluster_score, disentanglement_report, evaluate_subsets, DisentanglementReport, ProbeConfig, SubsetGrid,
};
use crate::losses::Lambdas;
use crate::model::{Checkpoint, Model};
use crate::phantom::Dataset;
use crate::train::{fit, TrainConfig};

pub const RESULT: &str = "result.json";

/// Outcome of one (lambdas, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub checkpoint: PathBuf,
    pub best_val: Option<f64>,
    /// Subset grid on the test split.
    pub test: SubsetGrid,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub trained: DisentanglementReport,
    /// Silhouette of the same architecture at its initial weights.
    pub untrained_cluster_score: f64,
}

impl RunResult {
    /// `[WT, TC, ET, Avg]` over the fifteen subsets.
    pub fn scores(&self) -> [f64; 4] {
        let m = self.test.means;
        [m[0], m[1], m[2], self.test.macro_avg]
    }
}

/// Directory name of a run, e.g. `cvae0.1_hsic0.1_rc1_conf0.5_dis0.5_seed0`.
pub fn run_name(l: &Lambdas, seed: u64) -> String {
    format!("cvae{}_hsic{}_rc{}_conf{}_dis{}_seed{seed}", l.cvae, l.hsic, l.rc, l.conf, l.dis)
}

/// Trains (or reuses) one run and evaluates it on the test split.
pub fn run_setting(
    base: &TrainConfig,
    data: &Dataset,
    lambdas: Lambdas,
    seed: u64,
    root: &Path,
    probe: Option<&ProbeConfig>,
) -> Result<RunResult> {
    let cfg = TrainConfig { lambdas, seed, ..base.clone() };
    let dir = root.join(run_name(&lambdas, seed));
    let result_path = dir.join(RESULT);
    if result_path.exists() {
        let text = fs::read_to_string(&result_path).map_err(|e| Error::io(&result_path, e))?;
        let cached: RunResult = serde_json::from_str(&text).map_err(|e| Error::json(&result_path, e))?;
        if cached.config == cfg && (probe.is_none() || cached.diagnostics.is_some()) {
            log::info!("reusing {}", dir.display());
            return Ok(cached);
        }
    }
    log::info!("training {}", dir.display());
    let outcome = fit(&cfg, data, &dir, false)?;
    let checkpoint = outcome.checkpoint().to_path_buf();
    let model = Model::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
    let test = evaluate_subsets(&model, &data.test)?;
    let diagnostics = match probe {
        Some(p) => {
            let untrained = Model::new(cfg.model_config(), cfg.seed)?;
            Some(Diagnostics {
                trained: disentanglement_report(&model, &data.train, &data.test, &ProbeConfig { seed, ..p.clone() })?,
                untrained_cluster_score: bias_cluster_score(&untrained, &data.test)?,
            })
        }
        None => None,
    };
    let result = RunResult { config: cfg, checkpoint, best_val: outcome.best_val, test, diagnostics };
    let json = serde_json::to_string_pretty(&result).map_err(|e| Error::json(&result_path, e))?;
    fs::write(&result_path, json).map_err(|e| Error::io(&result_path, e))?;
    Ok(result)
}

/// The six ladder configurations, baseline first: each row switches on one
/// more term at its configured weight.
pub fn ladder(full: Lambdas) -> Vec<(&'static str, Lambdas)> {
    let z = Lambdas::ZERO;
    vec![
        ("Baseline (L_seg only)", z),
        ("+ L_CVAE", Lambdas { cvae: full.cvae, ..z }),
        ("+ L_HSIC", Lambdas { cvae: full.cvae, hsic: full.hsic, ..z }),
        ("+ L_RC", Lambdas { conf: 0.0, dis: 0.0, ..full }),
        ("+ L_conf", Lambdas { dis: 0.0, ..full }),
        ("+ L_dis (full)", full),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub lambdas: Lambdas,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
    pub avg: f64,
    /// `[WT, TC, ET, Avg]` per seed, in seed order.
    pub per_seed: Vec<[f64; 4]>,
}

impl TableRow {
    fn from_runs(name: String, lambdas: Lambdas, runs: &[RunResult]) -> Self {
        let per_seed: Vec<[f64; 4]> = runs.iter().map(RunResult::scores).collect();
        let n = per_seed.len().max(1) as f64;
        let mean = |i: usize| per_seed.iter().map(|s| s[i]).sum::<f64>() / n;
        TableRow { name, lambdas, wt: mean(0), tc: mean(1), et: mean(2), avg: mean(3), per_seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

/// Trains the six ladder rows for every seed (shared seeds across rows).
pub fn ablate(base: &TrainConfig, data: &Dataset, seeds: &[u64], root: &Path) -> Result<AblationTable> {
    ablate_rows(base, data, seeds, root, &[0, 1, 2, 3, 4, 5], None).map(|(t, _)| t)
}

/// Trains the selected ladder rows (indices into [`ladder`]); returns the
/// table and the individual runs, row-major.
pub fn ablate_rows(
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    root: &Path,
    rows: &[usize],
    probe: Option<&ProbeConfig>,
) -> Result<(AblationTable, Vec<Vec<RunResult>>)> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let steps = ladder(base.lambdas);
    let mut table = Vec::new();
    let mut all = Vec::new();
    for &i in rows {
        let (name, lambdas) = *steps.get(i).ok_or_else(|| Error::config("rows", format!("no ladder row {i}")))?;
        let runs =
            seeds.iter().map(|&s| run_setting(base, data, lambdas, s, root, probe)).collect::<Result<Vec<_>>>()?;
        table.push(TableRow::from_runs(name.to_string(), lambdas, &runs));
        all.push(runs);
    }
    Ok((AblationTable { seeds: seeds.to_vec(), rows: table }, all))
}

/// Swept values per coefficient, in table order.
pub const SWEEP_GRID: [(&str, [f64; 3]); 5] = [
    ("lambda1", [0.05, 0.1, 0.2]),
    ("lambda2", [0.05, 0.1, 0.2]),
    ("lambda3", [0.5, 1.0, 2.0]),
    ("lambda4", [0.3, 0.5, 0.7]),
    ("lambda5", [0.3, 0.5, 0.7]),
];

fn with_coefficient(base: Lambdas, index: usize, value: f64) -> Lambdas {
    let mut l = base;
    match index {
        0 => l.cvae = value,
        1 => l.hsic = value,
        2 => l.rc = value,
        3 => l.conf = value,
        _ => l.dis = value,
    }
    l
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coefficient: String,
    pub value: f64,
    pub row: TableRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// `max - min` of Avg within each coefficient block.
    pub ranges: Vec<(String, f64)>,
}

/// One-at-a-time sweep around `base.lambdas`. Settings that coincide (the
/// defaults in each block) share one cached run.
pub fn sweep(base: &TrainConfig, data: &Dataset, seeds: &[u64], root: &Path) -> Result<SweepTable> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let mut rows = Vec::new();
    let mut ranges = Vec::new();
    for (i, (name, values)) in SWEEP_GRID.iter().enumerate() {
        let mut avgs = Vec::new();
        for &v in values {
            let lambdas = with_coefficient(base.lambdas, i, v);
            let runs =
                seeds.iter().map(|&s| run_setting(base, data, lambdas, s, root, None)).collect::<Result<Vec<_>>>()?;
            let row = TableRow::from_runs(format!("{name}={v}"), lambdas, &runs);
            avgs.push(row.avg);
            rows.push(SweepRow { coefficient: name.to_string(), value: v, row });
        }
        let max = avgs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = avgs.iter().cloned().fold(f64::INFINITY, f64::min);
        ranges.push((name.to_string(), max - min));
    }
    Ok(SweepTable { seeds: seeds.to_vec(), rows, ranges })
}
