use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with weight decay added to the gradient (coupled L2).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.value(id).numel()]).collect();
        Adam { weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// still decay and keep their moment estimates moving.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let wd = self.weight_decay as f32;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = params.value_mut(id).data_mut();
            let g = grads.get(i).and_then(|g| g.as_deref());
            for j in 0..theta.len() {
                let gj = g.map_or(0.0, |g| g[j]) + wd * theta[j];
                m[j] = (BETA1 as f32) * m[j] + (1.0 - BETA1 as f32) * gj;
                v[j] = (BETA2 as f32) * v[j] + (1.0 - BETA2 as f32) * gj * gj;
                let mhat = m[j] as f64 / c1;
                let vhat = v[j] as f64 / c2;
                theta[j] -= (lr * mhat / (vhat.sqrt() + EPS)) as f32;
            }
        }
    }

    /// Moment tensors named `adam.m/<param>` and `adam.v/<param>`.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, id) in params.ids().enumerate() {
            let shape = params.value(id).shape().to_vec();
            out.push((format!("adam.m/{}", params.name(id)), Tensor::new(shape.clone(), self.m[i].clone())));
            out.push((format!("adam.v/{}", params.name(id)), Tensor::new(shape, self.v[i].clone())));
        }
        out
    }

    pub fn restore(&mut self, params: &ParamStore, ckpt: &Checkpoint, step: u64) -> Result<()> {
        for (i, id) in params.ids().enumerate() {
            let name = params.name(id);
            for (slot, prefix) in [(&mut self.m[i], "adam.m"), (&mut self.v[i], "adam.v")] {
                let t = ckpt
                    .tensor(&format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {prefix}/{name}")))?;
                if t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!("optimizer state {prefix}/{name} has the wrong size")));
                }
                slot.copy_from_slice(t.data());
            }
        }
        self.step = step;
        Ok(())
    }
}
