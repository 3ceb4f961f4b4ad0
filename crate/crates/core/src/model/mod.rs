//! The dual-stream network: causal encoder, bias encoder, fusion into the
//! mediator, and the segmentation, reconstruction, causality and
//! counterfactual heads.

mod checkpoint;
mod config;
pub mod layers;
mod network;

pub use checkpoint::{Checkpoint, CheckpointKind, SCHEMA_VERSION};
pub use config::{Bottleneck, ModelConfig};
pub use network::{
    component, BiasPosterior, CausalFeatures, Counterfactual, Fused, Heads, Model, SampleInputs, SampleOutputs,
};
