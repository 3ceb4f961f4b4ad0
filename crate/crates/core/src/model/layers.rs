use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvGeom, Graph, NodeId, ParamId, ParamStore, Spread, Tensor};
use crate::rng::Rng;

/// Instance-norm epsilon.
pub const NORM_EPS: f32 = 1e-5;
/// AdaIN spread floor.
pub const ADAIN_EPS: f32 = 1e-5;

/// Builds parameters under a common name prefix with a shared init stream.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub planar: bool,
}

fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng) as f32).collect())
}

impl Builder<'_> {
    /// Kernel/stride/pad for a cubic `k`, collapsing the depth axis in planar mode.
    pub fn geom(&self, k: usize, stride: usize) -> ConvGeom {
        let pad = (k - 1) / 2;
        if self.planar {
            ConvGeom { kernel: [1, k, k], stride: [1, stride, stride], pad: [0, pad, pad] }
        } else {
            ConvGeom { kernel: [k; 3], stride: [stride; 3], pad: [pad; 3] }
        }
    }

    pub fn factor(&self, f: usize) -> [usize; 3] {
        if self.planar {
            [1, f, f]
        } else {
            [f; 3]
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let geom = self.geom(k, stride);
        let taps: usize = geom.kernel.iter().product();
        let std = (2.0 / (cin * taps) as f64).sqrt();
        let w = self.store.add(
            format!("{name}.weight"),
            normal_tensor(self.rng, vec![cout, cin, geom.kernel[0], geom.kernel[1], geom.kernel[2]], std),
        );
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Conv { w, b, geom }
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, f: usize) -> ConvTranspose {
        let factor = self.factor(f);
        let std = (2.0 / cin as f64).sqrt();
        let w = self.store.add(
            format!("{name}.weight"),
            normal_tensor(self.rng, vec![cin, cout, factor[0], factor[1], factor[2]], std),
        );
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvTranspose { w, b, factor }
    }

    /// `std` scales the weight init; `bias` is the constant bias init.
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize, std: f64, bias: f32) -> Linear {
        let w = self.store.add(format!("{name}.weight"), normal_tensor(self.rng, vec![cout, cin], std));
        let b = self.store.add(format!("{name}.bias"), Tensor::full(vec![cout], bias));
        Linear { w, b }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.conv(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub factor: [usize; 3],
}

impl ConvTranspose {
    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.conv_transpose(x, w, Some(b), self.factor)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.linear(x, w, b)
    }
}

/// Conv, instance norm, leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
}

impl ConvBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        // The norm removes any per-channel constant, so the conv has no bias.
        ConvBlock { conv: b.conv(name, cin, cout, 3, stride, false) }
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId, slope: f32) -> NodeId {
        let y = self.conv.apply(g, p, x);
        let y = g.standardize(y, NORM_EPS, Spread::SqrtVarEps);
        g.leaky_relu(y, slope)
    }
}

/// `gamma(b) * (f - mean_c(f)) / (std_c(f) + eps) + beta(b)` with `gamma, beta`
/// from one affine map of the bias code.
#[derive(Clone, Debug)]
pub struct AdaIn {
    pub gamma: Linear,
    pub beta: Linear,
}

impl AdaIn {
    pub fn new(b: &mut Builder<'_>, name: &str, code_dim: usize, channels: usize) -> Self {
        let std = 0.1 / (code_dim as f64).sqrt();
        AdaIn {
            gamma: b.linear(&format!("{name}.gamma"), code_dim, channels, std, 1.0),
            beta: b.linear(&format!("{name}.beta"), code_dim, channels, std, 0.0),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, f: NodeId, code: NodeId) -> NodeId {
        let gamma = self.gamma.apply(g, p, code);
        let beta = self.beta.apply(g, p, code);
        adain(g, f, gamma, beta)
    }
}

/// AdaIN with explicit per-channel `gamma` and `beta` nodes.
pub fn adain(g: &mut Graph, f: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    let z = g.standardize(f, ADAIN_EPS, Spread::StdPlusEps);
    g.channel_affine(z, gamma, beta)
}

/// Squeeze-and-excitation channel attention.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            squeeze: b.linear(&format!("{name}.squeeze"), channels, hidden, (2.0 / channels as f64).sqrt(), 0.0),
            excite: b.linear(&format!("{name}.excite"), hidden, channels, (1.0 / hidden as f64).sqrt(), 0.0),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NodeId {
        let s = g.global_avg_pool(x);
        let s = self.squeeze.apply(g, p, s);
        let s = g.leaky_relu(s, 0.0);
        let s = self.excite.apply(g, p, s);
        let s = g.sigmoid(s);
        g.channel_scale(x, s)
    }
}
