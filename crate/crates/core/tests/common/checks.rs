//! Library-vs-oracle comparisons shared by the loss tests and the acceptance run.
#![allow(dead_code)]

use cdseg::autograd::{Graph, Tensor};
use cdseg::domain::{Availability, GridShape, NUM_MODALITIES};
use cdseg::losses;
use cdseg::model::{Checkpoint, CheckpointKind, Heads, Model, ModelConfig, SampleInputs};
use cdseg::phantom::{Dataset, PhantomConfig};
use cdseg::train::TrainConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Absolute differences between each loss and its oracle on seeded random inputs.
pub fn oracle_differences(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    // seg: 2 samples, K=4, 4x4x4
    let (b, k, v) = (2, 4, 64);
    let logits = gaussian(&mut r, b * k * v);
    let lab = labels(&mut r, b * v, 4);
    let got = losses::seg_loss(&logits, &lab, b, k).unwrap().value;
    out.push(("seg", (got - seg_oracle(&logits, &lab, b, k)).abs()));

    // cvae: three modalities
    let mut pairs = Vec::new();
    let mut posts = Vec::new();
    for _ in 0..3 {
        pairs.push((gaussian(&mut r, 64), gaussian(&mut r, 64)));
        posts.push((gaussian(&mut r, 16), uniform(&mut r, 16, -1.0, 1.0)));
    }
    let pr: Vec<(&[f64], &[f64])> = pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let po: Vec<(&[f64], &[f64])> = posts.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let got = losses::cvae_loss(&pr, &po, 0.01).unwrap().value;
    out.push(("cvae", (got - cvae_oracle(&pairs, &posts, 0.01)).abs()));

    // hsic: N=4 fixed matrices, median bandwidths
    let n = 4;
    let c = gaussian(&mut r, n * 3);
    let bb = gaussian(&mut r, n * 5);
    let got = losses::hsic(&c, 3, &bb, 5, n, None).unwrap().value;
    out.push(("hsic", (got - hsic_oracle(&c, 3, &bb, 5, n, None)).abs()));

    // rc: one 4^3 map
    let map = uniform(&mut r, 64, 0.0, 1.0);
    let lab = labels(&mut r, 64, 4);
    let got = losses::rc_loss(&map, &lab, 1).unwrap().value;
    out.push(("rc", (got - rc_oracle(&map, &lab, 1)).abs()));

    // conf: K=4 on 4^3
    let logits = gaussian(&mut r, 4 * 64);
    let got = losses::confusion_loss(&logits, 1, 4).unwrap().value;
    out.push(("conf", (got - conf_oracle(&logits, 1, 4)).abs()));

    // dis: two samples
    let a = uniform(&mut r, 128, 0.0, 1.0);
    let y = uniform(&mut r, 128, 0.0, 1.0);
    let got = losses::discrepancy_loss(&a, &y, 2).unwrap().value;
    out.push(("dis", (got - dis_oracle(&a, &y, 2)).abs()));
    out
}

/// Tolerance per term for [`oracle_differences`].
pub fn oracle_tolerance(term: &str) -> f64 {
    match term {
        "hsic" => 1e-8,
        "conf" => 1e-7,
        _ => 1e-6,
    }
}

pub const FD_STEP: f64 = 1e-3;

/// Relative error between analytic and central-difference gradients per term.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let (b, k, v) = (2, 4, 27);
    let logits = gaussian(&mut r, b * k * v);
    let lab = labels(&mut r, b * v, 4);
    let analytic = losses::seg_loss(&logits, &lab, b, k).unwrap().grad;
    let numeric = numeric_grad(&logits, FD_STEP, |x| losses::seg_loss(x, &lab, b, k).unwrap().value);
    out.push(("seg", rel_err(&analytic, &numeric)));

    // cvae: gradients w.r.t. reconstruction, mu and logvar stacked. The
    // reconstruction is kept at least 0.05 from x so |.| is smooth within the step.
    let m = 2;
    let (nv, nl) = (20, 6);
    let xs: Vec<Vec<f64>> = (0..m).map(|_| gaussian(&mut r, nv)).collect();
    let mut params = Vec::new();
    for x in &xs {
        let off = uniform(&mut r, nv, 0.05, 0.5);
        let signs = uniform(&mut r, nv, -1.0, 1.0);
        params.extend(x.iter().zip(off.iter().zip(&signs)).map(|(x, (o, s))| x + o * s.signum()));
    }
    for _ in 0..m {
        params.extend(gaussian(&mut r, nl));
        params.extend(uniform(&mut r, nl, -1.0, 1.0));
    }
    let eval = |p: &[f64]| {
        let pr: Vec<(&[f64], &[f64])> = (0..m).map(|i| (xs[i].as_slice(), &p[i * nv..(i + 1) * nv])).collect();
        let base = m * nv;
        let po: Vec<(&[f64], &[f64])> = (0..m)
            .map(|i| {
                (&p[base + i * 2 * nl..base + i * 2 * nl + nl], &p[base + i * 2 * nl + nl..base + (i + 1) * 2 * nl])
            })
            .collect();
        losses::cvae_loss(&pr, &po, 0.5).unwrap()
    };
    let g = eval(&params);
    let mut analytic: Vec<f64> = g.recon.concat();
    for i in 0..m {
        analytic.extend(&g.mu[i]);
        analytic.extend(&g.logvar[i]);
    }
    let numeric = numeric_grad(&params, FD_STEP, |p| eval(p).value);
    out.push(("cvae", rel_err(&analytic, &numeric)));

    // hsic with the bandwidths held at their median values, matching the
    // detached-bandwidth gradient.
    let n = 8;
    let c = gaussian(&mut r, n * 3);
    let noise = gaussian(&mut r, n * 2);
    let bb: Vec<f64> = (0..n * 2).map(|i| c[(i / 2) * 3 + i % 2] + 0.5 * noise[i]).collect();
    let h = losses::hsic(&c, 3, &bb, 2, n, None).unwrap();
    let sig = Some((h.sigma_c, h.sigma_b));
    let mut joint = c.clone();
    joint.extend(&bb);
    let numeric =
        numeric_grad(&joint, FD_STEP, |p| losses::hsic(&p[..n * 3], 3, &p[n * 3..], 2, n, sig).unwrap().value);
    let mut analytic = h.grad_c.clone();
    analytic.extend(&h.grad_b);
    out.push(("hsic", rel_err(&analytic, &numeric)));

    let map = uniform(&mut r, 2 * 27, 0.05, 0.95);
    let lab = labels(&mut r, 2 * 27, 4);
    let analytic = losses::rc_loss(&map, &lab, 2).unwrap().grad;
    let numeric = numeric_grad(&map, FD_STEP, |x| losses::rc_loss(x, &lab, 2).unwrap().value);
    out.push(("rc", rel_err(&analytic, &numeric)));

    let logits = gaussian(&mut r, 2 * 4 * 27);
    let analytic = losses::confusion_loss(&logits, 2, 4).unwrap().grad;
    let numeric = numeric_grad(&logits, FD_STEP, |x| losses::confusion_loss(x, 2, 4).unwrap().value);
    out.push(("conf", rel_err(&analytic, &numeric)));

    let a = uniform(&mut r, 2 * 27, 0.0, 1.0);
    let y = uniform(&mut r, 2 * 27, 0.0, 1.0);
    let d = losses::discrepancy_loss(&a, &y, 2).unwrap();
    let mut joint = a.clone();
    joint.extend(&y);
    let numeric = numeric_grad(&joint, FD_STEP, |p| losses::discrepancy_loss(&p[..54], &p[54..], 2).unwrap().value);
    let mut analytic = d.grad_a.clone();
    analytic.extend(&d.grad_y);
    out.push(("dis", rel_err(&analytic, &numeric)));
    out
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// HSIC of a variable with itself and with an independent draw, N=64 scalar
/// Gaussian rows. The biased estimator's floor grows with row dimension, so
/// the ratio is measured on scalar rows.
pub fn hsic_dependence_ratio(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let n = 64;
    let d = 1;
    let c = gaussian(&mut r, n * d);
    let b = gaussian(&mut r, n * d);
    let dep = losses::hsic(&c, d, &c, d, n, None).unwrap().value;
    let ind = losses::hsic(&c, d, &b, d, n, None).unwrap().value;
    (dep, ind)
}

/// Small untrained model on a 16³ grid.
pub fn small_model(seed: u64) -> Model {
    let config = ModelConfig { grid: GridShape::cube(16), ..ModelConfig::default() };
    Model::new(config, seed).unwrap()
}

pub fn random_volumes(r: &mut ChaCha8Rng, voxels: usize) -> [Vec<f32>; NUM_MODALITIES] {
    std::array::from_fn(|_| (0..voxels).map(|_| r.random_range(-2.0f32..2.0)).collect())
}

pub fn random_mask(r: &mut ChaCha8Rng) -> Availability {
    Availability::from_bits(r.random_range(1u8..16))
}

fn slots(v: &[Vec<f32>; NUM_MODALITIES]) -> [Option<&[f32]>; NUM_MODALITIES] {
    std::array::from_fn(|i| Some(v[i].as_slice()))
}

fn logits(model: &Model, inputs: &SampleInputs<'_>) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let out = model.forward(&mut g, inputs, Heads::ALL).unwrap();
    let cf = out.counterfactual.expect("counterfactual head requested");
    (g.value(out.seg_logits).clone(), g.value(cf.logits).clone())
}

/// Sentinel injection. Returns, maximised over trials:
/// (seg change when only bias inputs change, counterfactual change when only
/// causal inputs change, the two "control" changes that must be nonzero).
pub fn sentinel_changes(seed: u64, trials: usize) -> [f32; 4] {
    let mut r = rng(seed);
    let model = small_model(seed);
    let voxels = model.config.grid.voxels();
    let l = model.config.bias_dim;
    let mut worst = [0.0f32, 0.0, f32::INFINITY, f32::INFINITY];
    for _ in 0..trials {
        let vols = random_volumes(&mut r, voxels);
        let sentinel = random_volumes(&mut r, voxels);
        let eps: [Vec<f32>; NUM_MODALITIES] =
            std::array::from_fn(|_| gaussian(&mut r, l).iter().map(|&v| v as f32).collect());
        let eps2: [Vec<f32>; NUM_MODALITIES] =
            std::array::from_fn(|_| gaussian(&mut r, l).iter().map(|&v| v as f32).collect());
        let avail = random_mask(&mut r);
        let base = SampleInputs { causal: slots(&vols), bias: slots(&vols), availability: avail, eps: Some(&eps) };
        let bias_perturbed =
            SampleInputs { causal: slots(&vols), bias: slots(&sentinel), availability: avail, eps: Some(&eps2) };
        let causal_perturbed =
            SampleInputs { causal: slots(&sentinel), bias: slots(&vols), availability: avail, eps: Some(&eps) };
        let (s0, c0) = logits(&model, &base);
        let (s1, c1) = logits(&model, &bias_perturbed);
        let (s2, c2) = logits(&model, &causal_perturbed);
        worst[0] = worst[0].max(s0.max_abs_diff(&s1));
        worst[1] = worst[1].max(c0.max_abs_diff(&c2));
        worst[2] = worst[2].min(c0.max_abs_diff(&c1));
        worst[3] = worst[3].min(s0.max_abs_diff(&s2));
    }
    worst
}

/// Largest |full - pruned| segmentation logit over `n` random inputs and
/// masks, with the pruned model restored from serialized bytes.
pub fn prune_parity(seed: u64, n: usize) -> f32 {
    let mut r = rng(seed);
    let model = small_model(seed);
    let bytes = model.to_checkpoint(CheckpointKind::Inference, serde_json::Value::Null).to_bytes().unwrap();
    let pruned = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert!(!pruned.has_training_branches());
    let voxels = model.config.grid.voxels();
    (0..n)
        .map(|_| {
            let vols = random_volumes(&mut r, voxels);
            let avail = random_mask(&mut r);
            model.predict(&vols, avail).unwrap().max_abs_diff(&pruned.predict(&vols, avail).unwrap())
        })
        .fold(0.0, f32::max)
}

/// Fraction of kept modalities and the number of empty masks over `draws` masks.
pub fn dropout_statistics(seed: u64, draws: usize) -> (f64, usize) {
    let mut r = cdseg::rng::stream(seed, &[cdseg::rng::tag::MASK]);
    let mut kept = 0usize;
    let mut empty = 0usize;
    for _ in 0..draws {
        let m = cdseg::train::sample_modality_mask(0.5, &mut r);
        kept += m.count();
        empty += usize::from(m.is_empty());
    }
    (kept as f64 / (draws * NUM_MODALITIES) as f64, empty)
}

/// Tiny phantom dataset in a temporary directory.
pub fn tiny_dataset(cases: usize, grid: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let config =
        PhantomConfig { cases, grid_shape: GridShape::cube(grid), master_seed: seed, ..PhantomConfig::default() };
    cdseg::phantom::generate_dataset(&config, dir.path(), false).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    (dir, data)
}

/// Training config for a tiny grid with `epochs` epochs.
pub fn tiny_train_config(grid: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        grid_shape: GridShape::cube(grid),
        epochs,
        seed,
        batch_size: 2,
        eval_every: epochs.max(1),
        ..TrainConfig::default()
    }
}

/// Steps whose logged total differs (bitwise) from the weighted sum of the
/// logged components, and the number of steps read.
pub fn additivity_violations(log: &std::path::Path) -> (usize, usize) {
    let text = std::fs::read_to_string(log).unwrap();
    let mut bad = 0;
    let mut n = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let f = |k: &str| v[k].as_f64().unwrap();
        let l = |k: &str| v["lambdas"][k].as_f64().unwrap();
        let expected = f("seg")
            + l("cvae") * f("cvae")
            + l("hsic") * f("hsic")
            + l("rc") * f("rc")
            + l("conf") * f("conf")
            + l("dis") * f("dis");
        n += 1;
        if expected.to_bits() != f("total").to_bits() {
            bad += 1;
        }
    }
    (bad, n)
}
