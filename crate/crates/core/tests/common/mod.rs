#![allow(clippy::needless_range_loop)]
//! Independent reference implementations used by the integration tests.
//!
//! These are deliberately written the slow, literal way (explicit matrices,
//! per-voxel loops, no shared helpers with the library) so that agreement is
//! evidence of correctness rather than of shared bugs.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn gaussian(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller, kept local so the oracle does not share sampling code.
    (0..n)
        .map(|_| {
            let u1: f64 = r.random_range(1e-12..1.0);
            let u2: f64 = r.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn labels(r: &mut ChaCha8Rng, n: usize, k: u8) -> Vec<u8> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

fn probs_at(logits: &[f64], k: usize, v: usize, base: usize, i: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|c| logits[base + c * v + i].exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Mean of soft multi-class Dice loss (per sample and class) and cross-entropy.
pub fn seg_oracle(logits: &[f64], labels: &[u8], batch: usize, k: usize) -> f64 {
    let v = labels.len() / batch;
    let mut dice_terms = Vec::new();
    let mut ce_terms = Vec::new();
    for b in 0..batch {
        let probs: Vec<Vec<f64>> = (0..v).map(|i| probs_at(logits, k, v, b * k * v, i)).collect();
        for c in 0..k {
            let mut inter = 0.0;
            let mut sp = 0.0;
            let mut sg = 0.0;
            for i in 0..v {
                let g = (labels[b * v + i] as usize == c) as u8 as f64;
                inter += probs[i][c] * g;
                sp += probs[i][c];
                sg += g;
            }
            dice_terms.push((2.0 * inter + 1e-5) / (sp + sg + 1e-5));
        }
        for i in 0..v {
            ce_terms.push(-probs[i][labels[b * v + i] as usize].ln());
        }
    }
    let dice = 1.0 - dice_terms.iter().sum::<f64>() / dice_terms.len() as f64;
    let ce = ce_terms.iter().sum::<f64>() / ce_terms.len() as f64;
    (dice + ce) / 2.0
}

pub fn cvae_oracle(pairs: &[(Vec<f64>, Vec<f64>)], posts: &[(Vec<f64>, Vec<f64>)], lambda_kl: f64) -> f64 {
    let mut total = 0.0;
    for ((x, xh), (mu, lv)) in pairs.iter().zip(posts) {
        let mut l1 = 0.0;
        for i in 0..x.len() {
            l1 += (x[i] - xh[i]).abs();
        }
        let mut kl = 0.0;
        for j in 0..mu.len() {
            let var = lv[j].exp();
            kl += mu[j] * mu[j] + var - var.ln() - 1.0;
        }
        total += l1 / x.len() as f64 + lambda_kl * 0.5 * kl;
    }
    total
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            for t in 0..n {
                c[i * n + j] += a[i * n + t] * b[t * n + j];
            }
        }
    }
    c
}

pub fn rbf_gram(x: &[f64], d: usize, n: usize, sigma: f64) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..d {
                s += (x[i * d + t] - x[j * d + t]).powi(2);
            }
            k[i * n + j] = (-s / sigma.powi(2)).exp();
        }
    }
    k
}

pub fn median_distance(x: &[f64], d: usize, n: usize) -> f64 {
    let mut all = Vec::new();
    for i in 0..n {
        for j in 0..i {
            let s: f64 = (0..d).map(|t| (x[i * d + t] - x[j * d + t]).powi(2)).sum();
            all.push(s.sqrt());
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = all.len();
    let med = if m % 2 == 1 { all[m / 2] } else { (all[m / 2 - 1] + all[m / 2]) / 2.0 };
    med.max(1e-6)
}

/// `Tr(K_C H K_B H) / (N-1)^2` with an explicit centering matrix.
pub fn hsic_oracle(c: &[f64], dc: usize, b: &[f64], db: usize, n: usize, sigmas: Option<(f64, f64)>) -> f64 {
    let (sc, sb) = sigmas.unwrap_or_else(|| (median_distance(c, dc, n), median_distance(b, db, n)));
    let kc = rbf_gram(c, dc, n, sc);
    let kb = rbf_gram(b, db, n, sb);
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
        }
    }
    let m = matmul(&matmul(&matmul(&kc, &h, n), &kb, n), &h, n);
    let tr: f64 = (0..n).map(|i| m[i * n + i]).sum();
    tr / ((n - 1) as f64).powi(2)
}

pub fn rc_oracle(map: &[f64], labels: &[u8], batch: usize) -> f64 {
    let v = labels.len() / batch;
    let mut dice = 0.0;
    let mut bce = 0.0;
    for b in 0..batch {
        let (mut i2, mut sa, mut sg) = (0.0, 0.0, 0.0);
        for i in 0..v {
            let a = map[b * v + i];
            let g = if labels[b * v + i] > 0 { 1.0 } else { 0.0 };
            i2 += a * g;
            sa += a;
            sg += g;
            let p = a.clamp(1e-6, 1.0 - 1e-6);
            bce -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
        }
        dice += (2.0 * i2 + 1e-5) / (sa + sg + 1e-5);
    }
    (1.0 - dice / batch as f64) + bce / (batch * v) as f64
}

pub fn conf_oracle(logits: &[f64], batch: usize, k: usize) -> f64 {
    let v = logits.len() / (batch * k);
    let mut s = 0.0;
    for b in 0..batch {
        for i in 0..v {
            let p = probs_at(logits, k, v, b * k * v, i);
            for c in 0..k {
                s += (p[c] - 1.0 / k as f64).powi(2);
            }
        }
    }
    s / logits.len() as f64
}

pub fn dis_oracle(a: &[f64], y: &[f64], batch: usize) -> f64 {
    let v = a.len() / batch;
    let mut s = 0.0;
    for b in 0..batch {
        let sa = &a[b * v..(b + 1) * v];
        let sy = &y[b * v..(b + 1) * v];
        let dot: f64 = (0..v).map(|i| sa[i] * sy[i]).sum();
        let na = sa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ny = sy.iter().map(|x| x * x).sum::<f64>().sqrt();
        s += dot / (na * ny + 1e-8);
    }
    s / batch as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let hi = f(&p);
            p[i] = orig - step;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over whole vectors.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nn);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}
