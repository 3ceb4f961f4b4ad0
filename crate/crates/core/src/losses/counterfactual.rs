use crate::error::{Error, Result};

use super::{softmax_backward, softmax_classes, Valued, COSINE_EPS};

/// Mean squared error between `softmax(logits)` and the uniform `1/K` target,
/// averaged over voxels and classes. `logits` is `[B, K, V]`.
pub fn confusion_loss(logits: &[f64], batch: usize, k: usize) -> Result<Valued> {
    if k < 2 || batch == 0 || !logits.len().is_multiple_of(batch * k) {
        return Err(Error::ShapeMismatch(format!("confusion_loss: {} logits for batch {batch}, K={k}", logits.len())));
    }
    let v = logits.len() / (batch * k);
    let n = logits.len() as f64;
    let target = 1.0 / k as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut p = vec![0.0; k * v];
    let mut dp = vec![0.0; k * v];
    let mut sum = 0.0;
    for b in 0..batch {
        let block = b * k * v..(b + 1) * k * v;
        softmax_classes(&logits[block.clone()], k, v, &mut p);
        for (d, &pi) in dp.iter_mut().zip(&p) {
            let e = pi - target;
            sum += e * e;
            *d = 2.0 * e / n;
        }
        softmax_backward(&p, &dp, k, v, &mut grad[block]);
    }
    Ok(Valued { value: sum / n, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepancyGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_y: Vec<f64>,
}

/// Cosine similarity between the causality map and the bias foreground
/// activation, per sample, averaged over the batch. Both are `[B, V]`.
pub fn discrepancy_loss(a: &[f64], y: &[f64], batch: usize) -> Result<DiscrepancyGrad> {
    if batch == 0 || a.len() != y.len() || !a.len().is_multiple_of(batch) {
        return Err(Error::ShapeMismatch(format!(
            "discrepancy_loss: {} vs {} values, batch {batch}",
            a.len(),
            y.len()
        )));
    }
    let v = a.len() / batch;
    let mut out = DiscrepancyGrad { value: 0.0, grad_a: vec![0.0; a.len()], grad_y: vec![0.0; y.len()] };
    let w = 1.0 / batch as f64;
    for b in 0..batch {
        let (sa, sy) = (&a[b * v..(b + 1) * v], &y[b * v..(b + 1) * v]);
        let dot: f64 = sa.iter().zip(sy).map(|(p, q)| p * q).sum();
        let na = sa.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = sy.iter().map(|q| q * q).sum::<f64>().sqrt();
        let den = na * ny + COSINE_EPS;
        out.value += w * dot / den;
        // d(dot/den)/da = y/den - dot/den^2 * ny * a/na, with the a/na term
        // dropped at zero norm.
        let ka = if na > 0.0 { dot * ny / (den * den * na) } else { 0.0 };
        let ky = if ny > 0.0 { dot * na / (den * den * ny) } else { 0.0 };
        for i in 0..v {
            out.grad_a[b * v + i] = w * (sy[i] / den - ka * sa[i]);
            out.grad_y[b * v + i] = w * (sa[i] / den - ky * sy[i]);
        }
    }
    Ok(out)
}
