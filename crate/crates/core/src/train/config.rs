use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::GridShape;
use crate::error::{Error, Result};
use crate::losses::Lambdas;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine annealing from the base rate to zero over all optimizer steps.
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambdas: Lambdas,
    /// KL weight inside the CVAE term (separate from `lambdas.cvae`).
    pub lambda_kl: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Per-modality drop probability.
    pub dropout_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grid_shape: GridShape,
    pub dataset_path: Option<PathBuf>,
    /// Validate (and refresh the best checkpoint) every this many epochs; the
    /// final epoch is always validated.
    pub eval_every: usize,
    /// Network shape; its grid is always taken from `grid_shape`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: Lambdas::default(),
            lambda_kl: 0.01,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            schedule: Schedule::Cosine,
            dropout_p: 0.5,
            epochs: 40,
            batch_size: 4,
            seed: 0,
            grid_shape: GridShape::cube(32),
            dataset_path: None,
            eval_every: 5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model config with the grid pinned to `grid_shape`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { grid: self.grid_shape, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        if !(self.lambda_kl.is_finite() && self.lambda_kl >= 0.0) {
            return Err(Error::config("lambda_kl", "must be finite and >= 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", format!("must lie in [0, 1), got {}", self.dropout_p)));
        }
        // HSIC needs two paired rows, which a single one-modality sample cannot give.
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        self.model_config().validate()
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
