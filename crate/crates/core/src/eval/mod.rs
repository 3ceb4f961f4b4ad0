//! Dice metrics, the missing-modality grid and disentanglement diagnostics.

mod disentangle;
mod metrics;
mod subsets;

pub use disentangle::{
    bias_cluster_score, bias_means, causal_modality_leak, chance_floor, disentanglement_report, hsic_permutation_test,
    nde_probe, pooled_causal_features, probe_dice, silhouette, DisentanglementReport, ProbeCase, ProbeConfig,
};
pub use metrics::{argmax_labels, dice, region_dice, region_masks, RegionMasks};
pub use subsets::{evaluate_masks, evaluate_subsets, Segmenter, SubsetGrid, SubsetRow};
