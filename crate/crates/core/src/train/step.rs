use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, NodeId};
use crate::domain::{Availability, NUM_CLASSES, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::losses::{self, total_loss, LossBundle, LossTerms};
use crate::model::{Heads, Model, SampleInputs, SampleOutputs};
use crate::phantom::MultimodalSample;
use crate::rng::{self, tag};

use super::config::TrainConfig;
use super::optim::Adam;

/// One sample of a batch with its dropout mask and reparameterization noise.
pub struct BatchItem<'a> {
    pub sample: &'a MultimodalSample,
    pub availability: Availability,
    pub eps: [Vec<f32>; NUM_MODALITIES],
}

impl<'a> BatchItem<'a> {
    pub fn new(sample: &'a MultimodalSample, availability: Availability, eps: [Vec<f32>; NUM_MODALITIES]) -> Self {
        BatchItem { sample, availability, eps }
    }
}

/// Standard-normal noise for batch slot `slot` of optimizer step `step`.
pub fn draw_eps(seed: u64, step: u64, slot: usize, dim: usize) -> [Vec<f32>; NUM_MODALITIES] {
    std::array::from_fn(|m| {
        let mut r = rng::stream(seed, &[tag::EPS, step, slot as u64, m as u64]);
        (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()
    })
}

/// Losses and summed parameter gradients of one batch.
pub struct StepOutcome {
    pub bundle: LossBundle,
    /// Share of the discrepancy gradient norm that lands on the causality map
    /// (the rest goes to the counterfactual foreground).
    pub dis_share_causal: f64,
    pub grads: Vec<Option<Vec<f32>>>,
}

struct Forward {
    graph: Graph,
    out: SampleOutputs,
    /// GAP-pooled `c_m` per available modality, canonical order.
    pooled: Vec<NodeId>,
}

fn to_f64(g: &Graph, id: NodeId) -> Vec<f64> {
    g.value(id).data().iter().map(|&v| v as f64).collect()
}

fn seed(seeds: &mut Vec<(NodeId, Vec<f32>)>, id: NodeId, grad: &[f64], scale: f64) {
    if scale == 0.0 {
        return;
    }
    let g = grad.iter().map(|&v| (v * scale) as f32).collect();
    seeds.push((id, g));
}

/// Forward every sample with all heads, assemble the weighted objective and
/// back-propagate it. Terms whose weight is zero are still evaluated and
/// logged but send no gradient.
pub fn compute_step(model: &Model, batch: &[BatchItem<'_>], cfg: &TrainConfig) -> Result<StepOutcome> {
    if !model.has_training_branches() {
        return Err(Error::Checkpoint("training needs a full model, not an inference export".into()));
    }
    if batch.is_empty() {
        return Err(Error::config("batch_size", "empty batch"));
    }
    let grid = model.config.grid;
    let v = grid.voxels();
    let b = batch.len();
    let k = NUM_CLASSES;

    let mut fwd = Vec::with_capacity(b);
    for item in batch {
        if item.sample.grid != grid {
            return Err(Error::ShapeMismatch(format!(
                "sample {} has grid {}, model expects {grid}",
                item.sample.id, item.sample.grid
            )));
        }
        let mut g = Graph::new();
        let mut inputs = SampleInputs::new(&item.sample.volumes, item.availability);
        inputs.eps = Some(&item.eps);
        let out = model.forward(&mut g, &inputs, Heads::ALL)?;
        let pooled = out.causal.iter().map(|(_, f)| g.global_avg_pool(f.bottleneck)).collect();
        fwd.push(Forward { graph: g, out, pooled });
    }

    let labels: Vec<u8> = batch.iter().flat_map(|it| it.sample.label_map.iter().copied()).collect();
    let cat = |pick: &dyn Fn(&Forward) -> NodeId| -> Vec<f64> {
        fwd.iter().flat_map(|f| to_f64(&f.graph, pick(f))).collect()
    };

    let seg = losses::seg_loss(&cat(&|f| f.out.seg_logits), &labels, b, k)?;

    let causality = |f: &Forward| f.out.causality.expect("all heads requested");
    let counterfactual = |f: &Forward| f.out.counterfactual.clone().expect("all heads requested");
    let rc = losses::rc_loss(&cat(&|f| causality(f)), &labels, b)?;
    let conf = losses::confusion_loss(&cat(&|f| counterfactual(f).logits), b, k)?;
    let dis = losses::discrepancy_loss(&cat(&|f| causality(f)), &cat(&|f| counterfactual(f).foreground), b)?;

    // CVAE and HSIC rows: one per (sample, available modality).
    let mut xs = Vec::new();
    let mut recons = Vec::new();
    let mut mus = Vec::new();
    let mut logvars = Vec::new();
    let mut c_rows = Vec::new();
    let mut b_rows = Vec::new();
    for f in &fwd {
        let g = &f.graph;
        for (i, post) in f.out.posteriors.iter().enumerate() {
            let x = f.out.inputs.iter().find(|(m, _)| *m == post.modality).map(|(_, n)| *n).expect("input encoded");
            let r = f.out.recon.iter().find(|(m, _)| *m == post.modality).map(|(_, n)| *n).expect("recon decoded");
            xs.push(to_f64(g, x));
            recons.push(to_f64(g, r));
            mus.push(to_f64(g, post.mu));
            logvars.push(to_f64(g, post.logvar));
            c_rows.extend(to_f64(g, f.pooled[i]));
            b_rows.extend(to_f64(g, post.sample));
        }
    }
    let pairs: Vec<(&[f64], &[f64])> = xs.iter().zip(&recons).map(|(x, r)| (x.as_slice(), r.as_slice())).collect();
    let posts: Vec<(&[f64], &[f64])> = mus.iter().zip(&logvars).map(|(m, l)| (m.as_slice(), l.as_slice())).collect();
    let cvae = losses::cvae_loss(&pairs, &posts, cfg.lambda_kl)?;
    let rows = pairs.len();
    let dc = model.config.feature_channels();
    let db = model.config.bias_dim;
    let hsic = losses::hsic(&c_rows, dc, &b_rows, db, rows, None)?;

    let terms = LossTerms {
        seg: seg.value,
        cvae: cvae.value / b as f64,
        hsic: hsic.value,
        rc: rc.value,
        conf: conf.value,
        dis: dis.value,
    };
    let bundle = total_loss(terms, cfg.lambdas)?;
    let lam = cfg.lambdas;

    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (na, ny) = (norm(&dis.grad_a), norm(&dis.grad_y));
    let dis_share_causal = if na + ny > 0.0 { na / (na + ny) } else { 0.0 };

    let mut grads: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
    let mut row = 0;
    for (s, f) in fwd.iter().enumerate() {
        let kv = k * v;
        let mut seeds = Vec::new();
        seed(&mut seeds, f.out.seg_logits, &seg.grad[s * kv..(s + 1) * kv], 1.0);
        let cf = counterfactual(f);
        seed(&mut seeds, cf.logits, &conf.grad[s * kv..(s + 1) * kv], lam.conf);
        seed(&mut seeds, cf.foreground, &dis.grad_y[s * v..(s + 1) * v], lam.dis);
        let map = causality(f);
        seed(&mut seeds, map, &rc.grad[s * v..(s + 1) * v], lam.rc);
        seed(&mut seeds, map, &dis.grad_a[s * v..(s + 1) * v], lam.dis);
        for (i, post) in f.out.posteriors.iter().enumerate() {
            let r = f.out.recon.iter().find(|(m, _)| *m == post.modality).map(|(_, n)| *n).expect("recon decoded");
            let w = lam.cvae / b as f64;
            seed(&mut seeds, r, &cvae.recon[row], w);
            seed(&mut seeds, post.mu, &cvae.mu[row], w);
            seed(&mut seeds, post.logvar, &cvae.logvar[row], w);
            seed(&mut seeds, f.pooled[i], &hsic.grad_c[row * dc..(row + 1) * dc], lam.hsic);
            seed(&mut seeds, post.sample, &hsic.grad_b[row * db..(row + 1) * db], lam.hsic);
            row += 1;
        }
        let sample_grads = f.graph.backward(&seeds, model.params.len()).into_param_grads();
        for (acc, g) in grads.iter_mut().zip(sample_grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *acc = Some(g),
                }
            }
        }
    }
    Ok(StepOutcome { bundle, dis_share_causal, grads })
}

/// One optimizer step on `batch` at learning rate `lr`.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    let outcome = compute_step(model, batch, cfg)?;
    for (i, g) in outcome.grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                let id = model.params.ids().nth(i).expect("grad index within params");
                return Err(Error::Degenerate(format!("non-finite gradient for {}", model.params.name(id))));
            }
        }
    }
    opt.update(&mut model.params, &outcome.grads, lr);
    Ok(outcome)
}
