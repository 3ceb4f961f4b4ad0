use crate::error::{Error, Result};

use super::{softmax_backward, softmax_classes, Valued, BCE_CLAMP, DICE_SMOOTH};

fn check_batch(what: &str, values: usize, per_voxel: usize, labels: &[u8], batch: usize) -> Result<usize> {
    if batch == 0 || !labels.len().is_multiple_of(batch) || values != labels.len() * per_voxel {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {values} values for {} labels in a batch of {batch}",
            labels.len()
        )));
    }
    Ok(labels.len() / batch)
}

/// Segmentation loss: the mean of soft multi-class Dice loss and voxelwise
/// cross-entropy.
///
/// `logits` is `[B, K, V]`, `labels` is `[B, V]` with values `< K`. Dice is
/// computed per sample and class and averaged; cross-entropy is averaged over
/// all voxels.
pub fn seg_loss(logits: &[f64], labels: &[u8], batch: usize, k: usize) -> Result<Valued> {
    let v = check_batch("seg_loss", logits.len(), k, labels, batch)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::UnknownLabel(bad));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut p = vec![0.0; k * v];
    let mut dp = vec![0.0; k * v];
    let mut dice_sum = 0.0;
    let mut ce_sum = 0.0;
    let n_dice = (batch * k) as f64;
    let n_vox = (batch * v) as f64;
    for b in 0..batch {
        let lg = &logits[b * k * v..(b + 1) * k * v];
        let lab = &labels[b * v..(b + 1) * v];
        softmax_classes(lg, k, v, &mut p);
        for c in 0..k {
            let pc = &p[c * v..(c + 1) * v];
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for i in 0..v {
                let g = if lab[i] as usize == c { 1.0 } else { 0.0 };
                inter += pc[i] * g;
                psum += pc[i];
                gsum += g;
            }
            let num = 2.0 * inter + DICE_SMOOTH;
            let den = psum + gsum + DICE_SMOOTH;
            dice_sum += num / den;
            for i in 0..v {
                let g = if lab[i] as usize == c { 1.0 } else { 0.0 };
                let ddice = (2.0 * g * den - num) / (den * den);
                dp[c * v + i] = -0.5 * ddice / n_dice;
            }
        }
        softmax_backward(&p, &dp, k, v, &mut grad[b * k * v..(b + 1) * k * v]);
        // Cross-entropy goes straight to the logits: d/dz = p - onehot.
        for i in 0..v {
            ce_sum += -log_softmax_at(lg, k, v, i, lab[i] as usize);
            let t = lab[i] as usize;
            for c in 0..k {
                let onehot = if c == t { 1.0 } else { 0.0 };
                grad[b * k * v + c * v + i] += 0.5 * (p[c * v + i] - onehot) / n_vox;
            }
        }
    }
    let dice_loss = 1.0 - dice_sum / n_dice;
    let ce = ce_sum / n_vox;
    Ok(Valued { value: 0.5 * (dice_loss + ce), grad })
}

fn log_softmax_at(lg: &[f64], k: usize, v: usize, i: usize, c: usize) -> f64 {
    let max = (0..k).map(|j| lg[j * v + i]).fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..k).map(|j| (lg[j * v + i] - max).exp()).sum::<f64>().ln() + max;
    lg[c * v + i] - lse
}

/// Region-causality loss: binary Dice loss plus binary cross-entropy between
/// the causality map and the whole-tumour mask (any non-background label).
///
/// `map` is `[B, V]` with values in `[0, 1]`. Dice is per sample and averaged;
/// BCE clamps probabilities to `[1e-6, 1 - 1e-6]` and averages over voxels.
pub fn rc_loss(map: &[f64], labels: &[u8], batch: usize) -> Result<Valued> {
    let v = check_batch("rc_loss", map.len(), 1, labels, batch)?;
    let mut grad = vec![0.0; map.len()];
    let mut dice_sum = 0.0;
    let mut bce_sum = 0.0;
    let n_vox = (batch * v) as f64;
    for b in 0..batch {
        let a = &map[b * v..(b + 1) * v];
        let lab = &labels[b * v..(b + 1) * v];
        let mut inter = 0.0;
        let mut asum = 0.0;
        let mut gsum = 0.0;
        for i in 0..v {
            let g = if lab[i] != 0 { 1.0 } else { 0.0 };
            inter += a[i] * g;
            asum += a[i];
            gsum += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = asum + gsum + DICE_SMOOTH;
        dice_sum += num / den;
        for i in 0..v {
            let g = if lab[i] != 0 { 1.0 } else { 0.0 };
            let ddice = (2.0 * g * den - num) / (den * den);
            let mut d = -ddice / batch as f64;
            let clamped = a[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            bce_sum += -(g * clamped.ln() + (1.0 - g) * (1.0 - clamped).ln());
            if clamped == a[i] {
                d += -(g / clamped - (1.0 - g) / (1.0 - clamped)) / n_vox;
            }
            grad[b * v + i] = d;
        }
    }
    Ok(Valued { value: (1.0 - dice_sum / batch as f64) + bce_sum / n_vox, grad })
}
