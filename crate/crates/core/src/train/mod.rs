//! Optimization: modality dropout, Adam with a cosine schedule, the weighted
//! objective, checkpointing and inference export.

mod config;
mod fit;
mod mask;
mod optim;
mod step;

pub use config::{Schedule, TrainConfig};
pub use fit::{
    batches_per_epoch, epoch_batches, export_inference, fit, fit_from_config, read_train_log, read_val_log, validate,
    FitOutcome, StepRecord, ValRecord, BEST, LAST, TRAIN_LOG, VAL_LOG,
};
pub use mask::sample_modality_mask;
pub use optim::Adam;
pub use step::{compute_step, draw_eps, train_step, BatchItem, StepOutcome};
