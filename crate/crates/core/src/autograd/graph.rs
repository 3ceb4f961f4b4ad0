use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// How a channel standardization divides by the spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spread {
    /// `(x - mean) / sqrt(var + eps)` (instance norm).
    SqrtVarEps,
    /// `(x - mean) / (std + eps)` (AdaIN).
    StdPlusEps,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    ConvTranspose { x: NodeId, w: NodeId, b: Option<NodeId>, factor: [usize; 3] },
    Standardize { x: NodeId, inv: Vec<f32>, ratio: Vec<f32> },
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    ChannelScale { x: NodeId, s: NodeId },
    LeakyRelu { x: NodeId, slope: f32 },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AffineScalar { x: NodeId, scale: f32 },
    Mean { inputs: Vec<NodeId> },
    Concat { inputs: Vec<NodeId> },
    Narrow { x: NodeId, offset: usize },
    Reshape { x: NodeId },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Upsample { x: NodeId, factor: [usize; 3] },
    Softmax { x: NodeId },
    Clamp { x: NodeId, lo: f32, hi: f32 },
    Reparam { mu: NodeId, logvar: NodeId, eps: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::Add { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Reparam { mu, logvar, .. } => vec![*mu, *logvar],
            Op::Mean { inputs } | Op::Concat { inputs } => inputs.clone(),
            Op::Standardize { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::AffineScalar { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::GlobalAvgPool { x }
            | Op::Upsample { x, .. }
            | Op::Softmax { x }
            | Op::Clamp { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Vec<f32>>>,
    nodes: HashMap<NodeId, Vec<f32>>,
}

impl Gradients {
    /// Gradient of a parameter, `None` when no seeded loss reached it.
    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params.get(id.index()).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn input(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes.get(&id).map(Vec::as_slice)
    }

    pub fn into_param_grads(self) -> Vec<Option<Vec<f32>>> {
        self.params
    }
}

/// Define-by-run computation tape.
///
/// Every op evaluates eagerly and records enough to run the reverse pass.
/// Parameters are copied into the tape once per graph, so a shared module
/// applied several times reads a single node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        id
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv input must be [C, D, H, W]");
        assert_eq!(ws[1], xs[0], "conv channel mismatch");
        let cout = ws[0];
        let (out, y) = kernels::conv3d_forward(
            self.value(x).data(),
            xs[0],
            [xs[1], xs[2], xs[3]],
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        self.push(Tensor::new(vec![cout, out[0], out[1], out[2]], y), Op::Conv { x, w, b, geom })
    }

    pub fn conv_transpose(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, factor: [usize; 3]) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], xs[0], "transposed conv channel mismatch");
        let cout = ws[1];
        let (out, y) = kernels::conv_transpose_forward(
            self.value(x).data(),
            xs[0],
            [xs[1], xs[2], xs[3]],
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            factor,
        );
        self.push(Tensor::new(vec![cout, out[0], out[1], out[2]], y), Op::ConvTranspose { x, w, b, factor })
    }

    /// Per-channel standardization over the spatial axes of `[C, ...]`.
    pub fn standardize(&mut self, x: NodeId, eps: f32, spread: Spread) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.numel() / c;
        let mut out = vec![0.0f32; xv.numel()];
        let mut inv = vec![0.0f32; c];
        let mut ratio = vec![1.0f32; c];
        for ch in 0..c {
            let xs = &xv.data()[ch * n..(ch + 1) * n];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            let (i, r) = match spread {
                Spread::SqrtVarEps => (1.0 / (var + eps as f64).sqrt(), 1.0),
                Spread::StdPlusEps => {
                    let denom = std + eps as f64;
                    (1.0 / denom, if std > 0.0 { denom / std } else { 0.0 })
                }
            };
            inv[ch] = i as f32;
            ratio[ch] = r as f32;
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = ((v as f64 - mean) * i) as f32;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Standardize { x, inv, ratio })
    }

    /// `x[c] * scale[c] + shift[c]` over `[C, ...]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.numel() / c;
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        assert_eq!(s.len(), c);
        assert_eq!(t.len(), c);
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            out[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v = *v * s[ch] + t[ch]);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::ChannelAffine { x, scale, shift })
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.numel() / c;
        let sv = self.value(s).data();
        assert_eq!(sv.len(), c);
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            out[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= sv[ch]);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::ChannelScale { x, s })
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f32) -> f32, op: Op) -> NodeId {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), op)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        self.map(x, |v| if v > 0.0 { v } else { v * slope }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    /// `scale * x + shift`.
    pub fn affine_scalar(&mut self, x: NodeId, scale: f32, shift: f32) -> NodeId {
        self.map(x, |v| scale * v + shift, Op::AffineScalar { x, scale })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Add { a, b })
    }

    /// Elementwise mean of equally shaped nodes, summed in the given order.
    pub fn mean(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "mean of zero nodes");
        let shape = self.shape(inputs[0]).to_vec();
        let mut acc = self.value(inputs[0]).data().to_vec();
        for &i in &inputs[1..] {
            assert_eq!(self.shape(i), &shape[..], "mean shape mismatch");
            acc.iter_mut().zip(self.value(i).data()).for_each(|(a, b)| *a += b);
        }
        let n = inputs.len() as f32;
        acc.iter_mut().for_each(|v| *v /= n);
        self.push(Tensor::new(shape, acc), Op::Mean { inputs: inputs.to_vec() })
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty());
        let rest = self.shape(inputs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in inputs {
            assert_eq!(&self.shape(i)[1..], &rest[..], "concat trailing shape mismatch");
            lead += self.shape(i)[0];
            data.extend_from_slice(self.value(i).data());
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        self.push(Tensor::new(shape, data), Op::Concat { inputs: inputs.to_vec() })
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "narrow out of range");
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.push(Tensor::new(out_shape, data), Op::Narrow { x, offset: start * inner })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(x).clone().reshaped(shape);
        self.push(v, Op::Reshape { x })
    }

    /// `[C, ...] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.numel() / c;
        let out = (0..c)
            .map(|ch| (xv.data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        self.push(Tensor::new(vec![c], out), Op::GlobalAvgPool { x })
    }

    /// `w [out, in] * x [in] + b [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.numel(), i, "linear input width mismatch");
        let out = (0..o)
            .map(|r| {
                let row = &wv.data()[r * i..(r + 1) * i];
                bv.data()[r] + row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect();
        self.push(Tensor::new(vec![o], out), Op::Linear { x, w, b })
    }

    /// Trilinear upsampling of `[C, D, H, W]` by integer factors.
    pub fn upsample(&mut self, x: NodeId, factor: [usize; 3]) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (dims, y) = kernels::upsample_forward(self.value(x).data(), xs[0], [xs[1], xs[2], xs[3]], factor);
        self.push(Tensor::new(vec![xs[0], dims[0], dims[1], dims[2]], y), Op::Upsample { x, factor })
    }

    /// Softmax over the leading (class) axis at every position.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let k = xv.shape()[0];
        let n = xv.numel() / k;
        let mut out = vec![0.0f32; xv.numel()];
        for p in 0..n {
            let m = (0..k).map(|c| xv.data()[c * n + p]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for c in 0..k {
                let e = (xv.data()[c * n + p] - m).exp();
                out[c * n + p] = e;
                z += e;
            }
            for c in 0..k {
                out[c * n + p] /= z;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Softmax { x })
    }

    /// `mu + exp(logvar / 2) * eps` with a caller-supplied `eps`.
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, eps: Vec<f32>) -> NodeId {
        let (m, l) = (self.value(mu).data(), self.value(logvar).data());
        assert_eq!(m.len(), eps.len());
        assert_eq!(l.len(), eps.len());
        let out = m.iter().zip(l).zip(&eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect();
        let shape = self.shape(mu).to_vec();
        self.push(Tensor::new(shape, out), Op::Reparam { mu, logvar, eps })
    }

    /// Reverse pass from externally computed output gradients.
    pub fn backward(&self, seeds: &[(NodeId, Vec<f32>)], n_params: usize) -> Gradients {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.len(), self.nodes[id.0].value.numel(), "seed gradient length mismatch");
            let slot = accumulate(&mut grads[id.0], g.len());
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let mut out = Gradients { params: vec![None; n_params], nodes: HashMap::new() };
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_op(idx, &node.op, g, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_op(&self, idx: usize, op: &Op, g: Vec<f32>, grads: &mut [Option<Vec<f32>>], out: &mut Gradients) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let len = |id: NodeId| self.nodes[id.0].value.numel();
        let y = &self.nodes[idx].value;
        match op {
            Op::Leaf => {
                out.nodes.insert(NodeId(idx), g);
            }
            Op::Param(pid) => {
                let slot = accumulate(&mut out.params[pid.index()], g.len());
                slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            Op::Conv { x, w, b, geom } => {
                let xs = val(*x).shape();
                let cout = val(*w).shape()[0];
                let (mut dw, mut db, mut dx) = (None, None, None);
                if self.wants(*w) {
                    dw = Some(vec![0.0; len(*w)]);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        db = Some(vec![0.0; len(*b)]);
                    }
                }
                if self.wants(*x) {
                    dx = Some(vec![0.0; len(*x)]);
                }
                kernels::conv3d_backward(
                    val(*x).data(),
                    xs[0],
                    [xs[1], xs[2], xs[3]],
                    val(*w).data(),
                    cout,
                    geom,
                    &g,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                add_into(grads, *w, dw);
                if let Some(b) = b {
                    add_into(grads, *b, db);
                }
                add_into(grads, *x, dx);
            }
            Op::ConvTranspose { x, w, b, factor } => {
                let xs = val(*x).shape();
                let cout = val(*w).shape()[1];
                let (mut dw, mut db, mut dx) = (None, None, None);
                if self.wants(*w) {
                    dw = Some(vec![0.0; len(*w)]);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        db = Some(vec![0.0; len(*b)]);
                    }
                }
                if self.wants(*x) {
                    dx = Some(vec![0.0; len(*x)]);
                }
                kernels::conv_transpose_backward(
                    val(*x).data(),
                    xs[0],
                    [xs[1], xs[2], xs[3]],
                    val(*w).data(),
                    cout,
                    *factor,
                    &g,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                add_into(grads, *w, dw);
                if let Some(b) = b {
                    add_into(grads, *b, db);
                }
                add_into(grads, *x, dx);
            }
            Op::Standardize { x, inv, ratio } => {
                if !self.wants(*x) {
                    return;
                }
                let c = inv.len();
                let n = g.len() / c;
                let mut dx = vec![0.0f32; g.len()];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    let ys = &y.data()[ch * n..(ch + 1) * n];
                    let mg = gs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / n as f64;
                    let (i, r) = (inv[ch] as f64, ratio[ch] as f64);
                    for ((d, &gv), &yv) in dx[ch * n..(ch + 1) * n].iter_mut().zip(gs).zip(ys) {
                        *d = (i * (gv as f64 - mg - mgy * yv as f64 * r)) as f32;
                    }
                }
                add_into(grads, *x, Some(dx));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let c = len(*scale);
                let n = g.len() / c;
                let xv = val(*x).data();
                let sv = val(*scale).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for ch in 0..c {
                        dx[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= sv[ch]);
                    }
                    add_into(grads, *x, Some(dx));
                }
                if self.wants(*scale) {
                    let ds = (0..c)
                        .map(|ch| {
                            g[ch * n..(ch + 1) * n]
                                .iter()
                                .zip(&xv[ch * n..(ch + 1) * n])
                                .map(|(&a, &b)| a as f64 * b as f64)
                                .sum::<f64>() as f32
                        })
                        .collect();
                    add_into(grads, *scale, Some(ds));
                }
                if self.wants(*shift) {
                    let dt = (0..c)
                        .map(|ch| g[ch * n..(ch + 1) * n].iter().map(|&a| a as f64).sum::<f64>() as f32)
                        .collect();
                    add_into(grads, *shift, Some(dt));
                }
            }
            Op::ChannelScale { x, s } => {
                let c = len(*s);
                let n = g.len() / c;
                let xv = val(*x).data();
                let sv = val(*s).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for ch in 0..c {
                        dx[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= sv[ch]);
                    }
                    add_into(grads, *x, Some(dx));
                }
                if self.wants(*s) {
                    let ds = (0..c)
                        .map(|ch| {
                            g[ch * n..(ch + 1) * n]
                                .iter()
                                .zip(&xv[ch * n..(ch + 1) * n])
                                .map(|(&a, &b)| a as f64 * b as f64)
                                .sum::<f64>() as f32
                        })
                        .collect();
                    add_into(grads, *s, Some(ds));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x).data();
                let dx = g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { gv * slope }).collect();
                add_into(grads, *x, Some(dx));
            }
            Op::Sigmoid { x } => {
                let dx = g.iter().zip(y.data()).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                add_into(grads, *x, Some(dx));
            }
            Op::AffineScalar { x, scale } => {
                let dx = g.iter().map(|&v| v * scale).collect();
                add_into(grads, *x, Some(dx));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                let dx = g.iter().zip(xv).map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { 0.0 }).collect();
                add_into(grads, *x, Some(dx));
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(grads, *a, Some(g.clone()));
                }
                if self.wants(*b) {
                    add_into(grads, *b, Some(g));
                }
            }
            Op::Mean { inputs } => {
                let n = inputs.len() as f32;
                let share: Vec<f32> = g.iter().map(|v| v / n).collect();
                for &i in inputs {
                    if self.wants(i) {
                        add_into(grads, i, Some(share.clone()));
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &i in inputs {
                    let l = len(i);
                    if self.wants(i) {
                        add_into(grads, i, Some(g[offset..offset + l].to_vec()));
                    }
                    offset += l;
                }
            }
            Op::Narrow { x, offset } => {
                let mut dx = vec![0.0f32; len(*x)];
                dx[*offset..*offset + g.len()].copy_from_slice(&g);
                add_into(grads, *x, Some(dx));
            }
            Op::Reshape { x } => add_into(grads, *x, Some(g)),
            Op::GlobalAvgPool { x } => {
                let c = g.len();
                let n = len(*x) / c;
                let mut dx = vec![0.0f32; len(*x)];
                for ch in 0..c {
                    let v = g[ch] / n as f32;
                    dx[ch * n..(ch + 1) * n].fill(v);
                }
                add_into(grads, *x, Some(dx));
            }
            Op::Linear { x, w, b } => {
                let (o, i) = (val(*w).shape()[0], val(*w).shape()[1]);
                let xv = val(*x).data();
                let wv = val(*w).data();
                if self.wants(*w) {
                    let mut dw = vec![0.0f32; o * i];
                    for r in 0..o {
                        for c in 0..i {
                            dw[r * i + c] = g[r] * xv[c];
                        }
                    }
                    add_into(grads, *w, Some(dw));
                }
                if self.wants(*b) {
                    add_into(grads, *b, Some(g.clone()));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; i];
                    for r in 0..o {
                        for c in 0..i {
                            dx[c] += g[r] * wv[r * i + c];
                        }
                    }
                    add_into(grads, *x, Some(dx));
                }
            }
            Op::Upsample { x, factor } => {
                let xs = val(*x).shape();
                let dx = kernels::upsample_backward(&g, xs[0], [xs[1], xs[2], xs[3]], *factor);
                add_into(grads, *x, Some(dx));
            }
            Op::Softmax { x } => {
                let k = y.shape()[0];
                let n = y.numel() / k;
                let p = y.data();
                let mut dx = vec![0.0f32; g.len()];
                for pos in 0..n {
                    let dot: f32 = (0..k).map(|c| p[c * n + pos] * g[c * n + pos]).sum();
                    for c in 0..k {
                        dx[c * n + pos] = p[c * n + pos] * (g[c * n + pos] - dot);
                    }
                }
                add_into(grads, *x, Some(dx));
            }
            Op::Reparam { mu, logvar, eps } => {
                if self.wants(*mu) {
                    add_into(grads, *mu, Some(g.clone()));
                }
                if self.wants(*logvar) {
                    let lv = val(*logvar).data();
                    let dl = g.iter().zip(lv).zip(eps).map(|((&gv, &l), &e)| gv * 0.5 * (0.5 * l).exp() * e).collect();
                    add_into(grads, *logvar, Some(dl));
                }
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f32>>], id: NodeId, g: Option<Vec<f32>>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
