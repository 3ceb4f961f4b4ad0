//! Loss terms of the training objective. Every term is a pure `f64` function
//! returning its value together with the analytic gradient with respect to
//! each differentiable input.

mod counterfactual;
mod cvae;
mod hsic;
mod segmentation;
mod total;

pub use counterfactual::{confusion_loss, discrepancy_loss, DiscrepancyGrad};
pub use cvae::{cvae_loss, kl_standard_normal, CvaeGrad};
pub use hsic::{hsic, median_bandwidth, GramPair, HsicOutput, BANDWIDTH_FLOOR};
pub use segmentation::{rc_loss, seg_loss};
pub use total::{total_loss, Lambdas, LossBundle, LossTerms};

/// Smoothing constant of the soft Dice terms.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Clamp applied to probabilities inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-6;
/// Denominator floor of the cosine discrepancy.
pub const COSINE_EPS: f64 = 1e-8;

/// A scalar loss and its gradient with respect to the primary input.
#[derive(Clone, Debug, PartialEq)]
pub struct Valued {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Softmax over the class axis of a `[K, V]` block, written into `out`.
pub(crate) fn softmax_classes(logits: &[f64], k: usize, v: usize, out: &mut [f64]) {
    for i in 0..v {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(logits[c * v + i]);
        }
        let mut sum = 0.0;
        for c in 0..k {
            let e = (logits[c * v + i] - max).exp();
            out[c * v + i] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * v + i] /= sum;
        }
    }
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits of a `[K, V]` block.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], k: usize, v: usize, dlogits: &mut [f64]) {
    for i in 0..v {
        let dot: f64 = (0..k).map(|c| p[c * v + i] * dp[c * v + i]).sum();
        for c in 0..k {
            dlogits[c * v + i] = p[c * v + i] * (dp[c * v + i] - dot);
        }
    }
}
