use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::domain::{Availability, Modality, NUM_CLASSES, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::losses::{self, hsic};
use crate::model::{Model, ModelConfig};
use crate::phantom::MultimodalSample;
use crate::rng::{self, tag};
use crate::train::Adam;

use super::metrics::{argmax_labels, dice, region_masks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    /// Silhouette of the `mu_m` vectors labelled by modality, in `[-1, 1]`.
    pub bias_cluster_score: f64,
    /// Balanced accuracy of a linear modality probe on pooled causal features.
    pub causal_modality_leak: f64,
    /// Mean WT Dice of the bias-only probe on the test split.
    pub nde_probe_dice: f64,
    /// Best constant-mask WT Dice on the same split.
    pub nde_chance_floor: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient (Euclidean). Points whose intra- and
/// nearest-cluster distances are both zero score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} points, {} labels", points.len(), labels.len())));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::Degenerate(format!("silhouette needs two clusters, got {}", clusters.len())));
    }
    let n = points.len();
    let mut degenerate = 0;
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![(0.0f64, 0usize); clusters.len()];
        for j in 0..n {
            if i != j {
                let c = clusters.binary_search(&labels[j]).expect("label listed");
                sums[c].0 += euclid(&points[i], &points[j]);
                sums[c].1 += 1;
            }
        }
        let own = clusters.binary_search(&labels[i]).expect("label listed");
        if sums[own].1 == 0 {
            continue; // singleton cluster: s = 0
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|&(c, s)| c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        } else {
            degenerate += 1;
        }
    }
    if degenerate > 0 {
        log::warn!("silhouette: {degenerate} of {n} points have zero intra- and inter-cluster distance; scored 0");
    }
    Ok(total / n as f64)
}

/// Posterior means `mu_m` of every modality of every case, in case order.
pub fn bias_means(model: &Model, cases: &[MultimodalSample]) -> Result<Vec<(Modality, Vec<f64>)>> {
    let mut out = Vec::with_capacity(cases.len() * NUM_MODALITIES);
    for case in cases {
        let mut g = Graph::new();
        for m in Modality::ALL {
            let x = model.volume_input(&mut g, &case.volumes[m.index()])?;
            let post = model.encode_bias(&mut g, x, m, vec![0.0; model.config.bias_dim])?;
            out.push((m, g.value(post.mu).data().iter().map(|&v| v as f64).collect()));
        }
    }
    Ok(out)
}

/// Silhouette of `mu_m` labelled by modality.
pub fn bias_cluster_score(model: &Model, cases: &[MultimodalSample]) -> Result<f64> {
    if cases.len() < 2 {
        return Err(Error::Degenerate("bias_cluster_score needs at least two cases".into()));
    }
    let means = bias_means(model, cases)?;
    let labels: Vec<usize> = means.iter().map(|(m, _)| m.index()).collect();
    let points: Vec<Vec<f64>> = means.into_iter().map(|(_, v)| v).collect();
    silhouette(&points, &labels)
}

/// GAP-pooled causal bottleneck per (case, modality), in case order.
pub fn pooled_causal_features(model: &Model, cases: &[MultimodalSample]) -> Result<Vec<(Modality, Vec<f64>)>> {
    let mut out = Vec::with_capacity(cases.len() * NUM_MODALITIES);
    for case in cases {
        let mut g = Graph::new();
        for m in Modality::ALL {
            let x = model.volume_input(&mut g, &case.volumes[m.index()])?;
            let f = model.encode_causal(&mut g, x, m);
            let p = g.global_avg_pool(f.bottleneck);
            out.push((m, g.value(p).data().iter().map(|&v| v as f64).collect()));
        }
    }
    Ok(out)
}

/// Softmax regression fitted by full-batch gradient descent on standardized
/// features; returns predicted classes for `test`.
fn linear_probe(train: &[(usize, &[f64])], test: &[&[f64]], classes: usize) -> Vec<usize> {
    const ITERS: usize = 300;
    const LR: f64 = 0.5;
    const L2: f64 = 1e-3;
    let d = train[0].1.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|(_, x)| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|(_, x)| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / std[j]).chain([1.0]).collect() };
    let xs: Vec<(usize, Vec<f64>)> = train.iter().map(|(y, x)| (*y, z(x))).collect();
    let mut w = vec![vec![0.0f64; d + 1]; classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        let s: Vec<f64> = w.iter().map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|v| v / sum).collect()
    };
    for _ in 0..ITERS {
        let mut grad = vec![vec![0.0f64; d + 1]; classes];
        for (y, x) in &xs {
            let p = scores(&w, x);
            for c in 0..classes {
                let r = p[c] - f64::from(u8::from(c == *y));
                grad[c].iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi / n);
            }
        }
        for c in 0..classes {
            for j in 0..=d {
                w[c][j] -= LR * (grad[c][j] + L2 * w[c][j]);
            }
        }
    }
    test.iter()
        .map(|x| {
            let p = scores(&w, &z(x));
            (0..classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
        })
        .collect()
}

/// Balanced accuracy of a linear probe predicting the modality from pooled
/// causal features, two-fold cross-validated over cases (even/odd).
pub fn causal_modality_leak(model: &Model, cases: &[MultimodalSample]) -> Result<f64> {
    if cases.len() < 2 {
        return Err(Error::Degenerate("modality probe needs at least two cases".into()));
    }
    let feats = pooled_causal_features(model, cases)?;
    let mut correct = [0usize; NUM_MODALITIES];
    let mut seen = [0usize; NUM_MODALITIES];
    for fold in 0..2 {
        let in_fold = |i: usize| (i / NUM_MODALITIES) % 2 == fold;
        let train: Vec<(usize, &[f64])> = feats
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_fold(*i))
            .map(|(_, (m, f))| (m.index(), f.as_slice()))
            .collect();
        let test: Vec<(usize, &[f64])> = feats
            .iter()
            .enumerate()
            .filter(|(i, _)| in_fold(*i))
            .map(|(_, (m, f))| (m.index(), f.as_slice()))
            .collect();
        let preds = linear_probe(&train, &test.iter().map(|(_, f)| *f).collect::<Vec<_>>(), NUM_MODALITIES);
        for ((y, _), p) in test.iter().zip(preds) {
            seen[*y] += 1;
            correct[*y] += usize::from(p == *y);
        }
    }
    let recalls: Vec<f64> =
        (0..NUM_MODALITIES).filter(|&c| seen[c] > 0).map(|c| correct[c] as f64 / seen[c] as f64).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, learning_rate: 2e-3, seed: 0 }
    }
}

/// Features and label map of one probe case. Features fill the
/// `NUM_MODALITIES x L` code slots of the counterfactual decoder.
pub struct ProbeCase<'a> {
    pub features: Vec<f32>,
    pub labels: &'a [u8],
}

/// Trains a fresh decoder of the counterfactual architecture from `train`
/// features to segmentation and returns its mean WT Dice on `test`.
pub fn probe_dice(
    config: &ModelConfig,
    train: &[ProbeCase<'_>],
    test: &[ProbeCase<'_>],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let l = config.bias_dim;
    if test.is_empty() || train.is_empty() {
        return Err(Error::Dataset("probe needs non-empty train and test splits".into()));
    }
    for c in train.iter().chain(test) {
        if c.features.len() != NUM_MODALITIES * l {
            return Err(Error::ShapeMismatch(format!(
                "probe features have {} entries, expected {}",
                c.features.len(),
                NUM_MODALITIES * l
            )));
        }
    }
    let probe_seed = rng::derive_seed(cfg.seed, &[tag::PROBE]);
    let mut probe = Model::new(config.clone(), probe_seed)?;
    let mut opt = Adam::new(&probe.params, 0.0);
    let forward = |probe: &Model, g: &mut Graph, f: &[f32]| -> Result<crate::model::Counterfactual> {
        let codes: Vec<(Modality, _)> = Modality::ALL
            .iter()
            .map(|&m| (m, g.input(Tensor::scalar_vec(f[m.index() * l..(m.index() + 1) * l].to_vec()))))
            .collect();
        probe.counterfactual_predict(g, &codes, Availability::ALL)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(probe_seed, &[tag::SHUFFLE, epoch as u64]));
        for &i in &order {
            let mut g = Graph::new();
            let out = forward(&probe, &mut g, &train[i].features)?;
            let logits: Vec<f64> = g.value(out.logits).data().iter().map(|&v| v as f64).collect();
            let loss = losses::seg_loss(&logits, train[i].labels, 1, NUM_CLASSES)?;
            let seed = loss.grad.iter().map(|&v| v as f32).collect();
            let grads = g.backward(&[(out.logits, seed)], probe.params.len()).into_param_grads();
            opt.update(&mut probe.params, &grads, cfg.learning_rate);
        }
    }
    let mut total = 0.0;
    for c in test {
        let mut g = Graph::new();
        let out = forward(&probe, &mut g, &c.features)?;
        let pred = argmax_labels(g.value(out.logits).data(), NUM_CLASSES);
        let (p, t) = (region_masks(&pred)?, region_masks(c.labels)?);
        total += dice(&p.wt, &t.wt)?;
    }
    Ok(total / test.len() as f64)
}

/// Best mean WT Dice any single fixed mask reaches over `cases`.
///
/// For a mask of size `k` the mean Dice is linear in the chosen voxels, with
/// voxel weight `sum_i [v in G_i] / (k + |G_i|)`, so the best size-`k` mask
/// takes the `k` heaviest voxels. Voxels are grouped by which cases contain
/// them and every `k` up to the union size is tried.
pub fn chance_floor(cases: &[MultimodalSample]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Dataset("chance floor of an empty split".into()));
    }
    let wts: Vec<Vec<bool>> = cases.iter().map(|c| region_masks(&c.label_map).map(|m| m.wt)).collect::<Result<_>>()?;
    let v = wts[0].len();
    if wts.iter().any(|w| w.len() != v) {
        return Err(Error::ShapeMismatch("chance floor over cases of different grids".into()));
    }
    let n = cases.len() as f64;
    let sizes: Vec<f64> = wts.iter().map(|w| w.iter().filter(|&&b| b).count() as f64).collect();
    let mut patterns: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for i in 0..v {
        let members: Vec<usize> = (0..wts.len()).filter(|&c| wts[c][i]).collect();
        if !members.is_empty() {
            *patterns.entry(members).or_default() += 1;
        }
    }
    let patterns: Vec<(Vec<usize>, usize)> = patterns.into_iter().collect();
    let support: usize = patterns.iter().map(|p| p.1).sum();

    let mut best = 100.0 * sizes.iter().filter(|&&s| s == 0.0).count() as f64 / n;
    let mut weighted: Vec<(f64, usize)> = Vec::with_capacity(patterns.len());
    for k in 1..=support {
        let kf = k as f64;
        weighted.clear();
        weighted
            .extend(patterns.iter().map(|(m, count)| (m.iter().map(|&c| 1.0 / (kf + sizes[c])).sum::<f64>(), *count)));
        weighted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut left, mut total) = (k, 0.0);
        for &(w, count) in &weighted {
            let take = count.min(left);
            total += w * take as f64;
            left -= take;
            if left == 0 {
                break;
            }
        }
        best = best.max(200.0 * total / n);
    }
    Ok(best)
}

fn probe_cases(feats: Vec<Vec<f32>>, split: &[MultimodalSample]) -> Vec<ProbeCase<'_>> {
    feats.into_iter().zip(split).map(|(features, c)| ProbeCase { features, labels: &c.label_map }).collect()
}

fn mean_features(model: &Model, cases: &[MultimodalSample]) -> Result<Vec<Vec<f32>>> {
    let means = bias_means(model, cases)?;
    Ok(means
        .chunks(NUM_MODALITIES)
        .map(|c| c.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f32)).collect())
        .collect())
}

/// Bias-only probe: frozen `mu_m` of all four modalities to segmentation,
/// trained on `train`, mean WT Dice on `test`.
pub fn nde_probe(
    model: &Model,
    train: &[MultimodalSample],
    test: &[MultimodalSample],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let tr = mean_features(model, train)?;
    let te = mean_features(model, test)?;
    probe_dice(&model.config, &probe_cases(tr, train), &probe_cases(te, test), cfg)
}

/// All three diagnostics; `train` feeds only the NDE probe.
pub fn disentanglement_report(
    model: &Model,
    train: &[MultimodalSample],
    test: &[MultimodalSample],
    probe: &ProbeConfig,
) -> Result<DisentanglementReport> {
    Ok(DisentanglementReport {
        bias_cluster_score: bias_cluster_score(model, test)?,
        causal_modality_leak: causal_modality_leak(model, test)?,
        nde_probe_dice: nde_probe(model, train, test, probe)?,
        nde_chance_floor: chance_floor(test)?,
    })
}

/// Permutation p-value of HSIC between paired rows: the fraction of
/// `permutations` row shuffles of `b` whose HSIC reaches the observed value
/// (with the usual +1 correction).
pub fn hsic_permutation_test(
    c: &[f64],
    dc: usize,
    b: &[f64],
    db: usize,
    n: usize,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let observed = hsic(c, dc, b, db, n, None)?;
    let bw = Some((observed.sigma_c, observed.sigma_b));
    let mut r = rng::stream(seed, &[tag::PROBE, 0x9e]);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut hits = 0;
    for _ in 0..permutations {
        idx.shuffle(&mut r);
        let shuffled: Vec<f64> = idx.iter().flat_map(|&i| b[i * db..(i + 1) * db].iter().copied()).collect();
        if hsic(c, dc, &shuffled, db, n, bw)?.value >= observed.value {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (permutations + 1) as f64)
}
