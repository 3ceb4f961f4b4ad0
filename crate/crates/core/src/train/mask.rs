use rand::Rng as _;

use crate::domain::{Availability, Modality, NUM_MODALITIES};
use crate::rng::Rng;

/// Keep probability of a non-empty mask under raw per-modality keep rate `q`.
fn conditional_keep(q: f64) -> f64 {
    q / (1.0 - (1.0 - q).powi(NUM_MODALITIES as i32))
}

/// Raw keep rate `q` for which rejecting empty draws leaves each modality kept
/// with probability `1 - p`. Plain `q = 1 - p` would overshoot (8/15 at p=0.5).
/// The conditional rate cannot drop below 1/M, so larger `p` saturates there.
fn raw_keep(p: f64) -> f64 {
    let target = 1.0 - p;
    if target >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (1e-12, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if conditional_keep(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Samples a non-empty availability mask in which each modality is present
/// with probability `1 - p` (for `p <= 0.75`). Modalities are drawn
/// independently and all-dropped draws are rejected.
pub fn sample_modality_mask(p: f64, rng: &mut Rng) -> Availability {
    debug_assert!((0.0..1.0).contains(&p));
    let q = raw_keep(p);
    loop {
        let kept: Vec<Modality> = Modality::ALL.into_iter().filter(|_| rng.random::<f64>() < q).collect();
        let mask = Availability::from_modalities(&kept);
        if !mask.is_empty() {
            return mask;
        }
    }
}
