use crate::autograd::{Graph, NodeId, ParamStore, Tensor};
use crate::domain::{Availability, Modality, NUM_CLASSES, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::rng;

use super::config::{Bottleneck, ModelConfig};
use super::layers::{AdaIn, Builder, ChannelAttention, Conv, ConvBlock, ConvTranspose, Linear, NORM_EPS};
use crate::autograd::Spread;

/// Parameter-name prefixes of the network components.
pub mod component {
    pub const CAUSAL_ENCODER: &str = "causal_encoder";
    pub const BIAS_ENCODER: &str = "bias_encoder";
    pub const FUSION: &str = "fusion";
    pub const SEG_DECODER: &str = "seg_decoder";
    pub const RECON_DECODER: &str = "recon_decoder";
    pub const CAUSALITY_HEAD: &str = "causality_head";
    pub const COUNTERFACTUAL: &str = "counterfactual";

    /// Components kept by an inference export.
    pub const INFERENCE: [&str; 4] = [CAUSAL_ENCODER, FUSION, SEG_DECODER, CAUSALITY_HEAD];
    pub const ALL: [&str; 7] =
        [CAUSAL_ENCODER, BIAS_ENCODER, FUSION, SEG_DECODER, RECON_DECODER, CAUSALITY_HEAD, COUNTERFACTUAL];
}

/// Causal encoder output for one modality: the bottleneck `c_m` plus one skip
/// map per finer level (index 0 is full resolution).
#[derive(Clone, Debug)]
pub struct CausalFeatures {
    pub bottleneck: NodeId,
    pub skips: Vec<NodeId>,
}

/// Graph nodes of one bias posterior.
#[derive(Clone, Debug)]
pub struct BiasPosterior {
    pub modality: Modality,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub sample: NodeId,
}

/// Fusion output.
#[derive(Clone, Debug)]
pub struct Fused {
    pub availability: Availability,
    /// Masked mean of the available `c_m`, before the bottleneck block.
    pub mean: NodeId,
    /// The mediator `M` (also the `c_fuse` fed to reconstruction).
    pub mediator: NodeId,
    /// Masked means of the skip maps, finest first.
    pub skips: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Counterfactual {
    /// `[K, D, H, W]` logits of the bias-only prediction.
    pub logits: NodeId,
    /// `1 - softmax(logits)[BG]`, shape `[1, D, H, W]`.
    pub foreground: NodeId,
}

struct CausalEncoder {
    /// One full-resolution block per modality, in canonical order.
    stems: Vec<ConvBlock>,
    down: Vec<ConvBlock>,
}

struct BiasEncoder {
    convs: Vec<Conv>,
    mu: Linear,
    logvar: Linear,
}

struct Fusion {
    conv1: ConvBlock,
    conv2: Conv,
    attention: ChannelAttention,
}

struct SegDecoder {
    ups: Vec<(ConvTranspose, ConvBlock)>,
    head: Conv,
}

struct ReconDecoder {
    ups: Vec<(ConvTranspose, Option<Conv>, AdaIn)>,
    head: Conv,
}

struct CounterfactualDecoder {
    input: Linear,
    ups: Vec<ConvTranspose>,
    head: Conv,
    coarse: [usize; 3],
    tail_factor: [usize; 3],
}

/// The dual-stream network. Training-only branches are absent in models
/// restored from an inference export.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    causal: CausalEncoder,
    fusion: Fusion,
    seg: SegDecoder,
    causality: Conv,
    upsample_factor: [usize; 3],
    bias: Option<BiasEncoder>,
    recon: Option<ReconDecoder>,
    counterfactual: Option<CounterfactualDecoder>,
}

/// Which heads a forward pass evaluates beyond segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub bias: bool,
    pub recon: bool,
    pub causality: bool,
    pub counterfactual: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { bias: true, recon: true, causality: true, counterfactual: true };
    pub const SEGMENTATION: Heads = Heads { bias: false, recon: false, causality: false, counterfactual: false };
}

/// Inputs of one sample. The causal and bias streams take separate volume
/// slots so tests can feed each stream independently; normally both hold the
/// same volumes.
#[derive(Clone, Debug)]
pub struct SampleInputs<'a> {
    pub causal: [Option<&'a [f32]>; NUM_MODALITIES],
    pub bias: [Option<&'a [f32]>; NUM_MODALITIES],
    pub availability: Availability,
    /// Reparameterization noise per modality; `None` uses the posterior mean.
    pub eps: Option<&'a [Vec<f32>; NUM_MODALITIES]>,
}

impl<'a> SampleInputs<'a> {
    /// Same volumes for both streams, masked by `availability`.
    pub fn new(volumes: &'a [Vec<f32>; NUM_MODALITIES], availability: Availability) -> Self {
        let slots = std::array::from_fn(|i| {
            let m = Modality::from_index(i).expect("index below NUM_MODALITIES");
            availability.contains(m).then(|| volumes[i].as_slice())
        });
        SampleInputs { causal: slots, bias: slots, availability, eps: None }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutputs {
    pub seg_logits: NodeId,
    pub fused: Fused,
    /// Input volume nodes of the available modalities, canonical order.
    pub inputs: Vec<(Modality, NodeId)>,
    pub causal: Vec<(Modality, CausalFeatures)>,
    pub posteriors: Vec<BiasPosterior>,
    pub recon: Vec<(Modality, NodeId)>,
    pub causality: Option<NodeId>,
    pub counterfactual: Option<Counterfactual>,
}

fn missing(what: &str) -> Error {
    Error::Checkpoint(format!("model has no {what} (restored from an inference export)"))
}

impl Model {
    /// Builds a freshly initialised model; `init_seed` fixes every weight.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        Self::build(config, init_seed, true)
    }

    /// Builds the model skeleton. With `full == false` only the inference
    /// components are created.
    pub fn build(config: ModelConfig, init_seed: u64, full: bool) -> Result<Self> {
        use component::*;
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = rng::stream(init_seed, &[rng::tag::INIT]);
        let mut b = Builder { store: &mut params, rng: &mut init, planar: config.grid.is_planar() };
        let levels = config.levels;
        let w = |l: usize| config.width(l);

        let causal = CausalEncoder {
            stems: Modality::ALL
                .iter()
                .map(|m| ConvBlock::new(&mut b, &format!("{CAUSAL_ENCODER}.stem.{}", m.name()), 1, w(0), 1))
                .collect(),
            down: (1..=levels)
                .map(|l| ConvBlock::new(&mut b, &format!("{CAUSAL_ENCODER}.down{l}"), w(l - 1), w(l), 2))
                .collect(),
        };

        let cf = config.feature_channels();
        let fusion = match config.bottleneck {
            Bottleneck::ConvAttention => Fusion {
                conv1: ConvBlock::new(&mut b, &format!("{FUSION}.conv1"), cf + NUM_MODALITIES, cf, 1),
                conv2: b.conv(&format!("{FUSION}.conv2"), cf, cf, 3, 1, false),
                attention: ChannelAttention::new(&mut b, &format!("{FUSION}.attention"), cf, 4),
            },
        };

        let seg = SegDecoder {
            ups: (0..levels)
                .rev()
                .map(|l| {
                    let up = b.conv_transpose(&format!("{SEG_DECODER}.up{l}"), w(l + 1), w(l), 2);
                    let conv = ConvBlock::new(&mut b, &format!("{SEG_DECODER}.conv{l}"), w(l), w(l), 1);
                    (up, conv)
                })
                .collect(),
            head: b.conv(&format!("{SEG_DECODER}.head"), w(0), NUM_CLASSES, 1, 1, true),
        };
        let causality = b.conv(&format!("{CAUSALITY_HEAD}.conv"), cf, 1, 1, 1, true);
        let upsample_factor = b.factor(config.downsample());

        let (bias, recon, counterfactual) = if full {
            let l = config.bias_dim;
            let widths = [1, w(0), w(1), w(2)];
            let bias = BiasEncoder {
                convs: (0..3)
                    .map(|i| b.conv(&format!("{BIAS_ENCODER}.conv{i}"), widths[i], widths[i + 1], 3, 2, true))
                    .collect(),
                mu: b.linear(&format!("{BIAS_ENCODER}.mu"), w(2), l, 0.1 / (w(2) as f64).sqrt(), 0.0),
                logvar: b.linear(&format!("{BIAS_ENCODER}.logvar"), w(2), l, 0.1 / (w(2) as f64).sqrt(), 0.0),
            };
            let recon = ReconDecoder {
                ups: (0..levels)
                    .rev()
                    .map(|lv| {
                        let up = b.conv_transpose(&format!("{RECON_DECODER}.up{lv}"), w(lv + 1), w(lv), 2);
                        let conv = (lv == levels - 1)
                            .then(|| b.conv(&format!("{RECON_DECODER}.conv{lv}"), w(lv), w(lv), 3, 1, false));
                        let adain = AdaIn::new(&mut b, &format!("{RECON_DECODER}.adain{lv}"), l, w(lv));
                        (up, conv, adain)
                    })
                    .collect(),
                head: b.conv(&format!("{RECON_DECODER}.head"), w(0), 1, 1, 1, true),
            };
            let cw = config.counterfactual_width;
            let coarse = config.dims_at(levels);
            let coarse_voxels: usize = coarse.iter().product();
            let n_ups = 2;
            let counterfactual = CounterfactualDecoder {
                input: b.linear(
                    &format!("{COUNTERFACTUAL}.input"),
                    NUM_MODALITIES * l + NUM_MODALITIES,
                    cw * coarse_voxels,
                    (1.0 / (NUM_MODALITIES * (l + 1)) as f64).sqrt(),
                    0.0,
                ),
                ups: (0..n_ups)
                    .map(|i| {
                        let cin = if i == 0 { cw } else { cw / 2 };
                        b.conv_transpose(&format!("{COUNTERFACTUAL}.up{i}"), cin, cw / 2, 2)
                    })
                    .collect(),
                head: b.conv(&format!("{COUNTERFACTUAL}.head"), cw / 2, NUM_CLASSES, 1, 1, true),
                coarse,
                tail_factor: b.factor(1 << (levels - n_ups)),
            };
            (Some(bias), Some(recon), Some(counterfactual))
        } else {
            (None, None, None)
        };

        Ok(Model { config, params, causal, fusion, seg, causality, upsample_factor, bias, recon, counterfactual })
    }

    pub fn has_training_branches(&self) -> bool {
        self.bias.is_some()
    }

    fn slope(&self) -> f32 {
        self.config.leaky_slope
    }

    /// Wraps a flat `(D, H, W)` volume as a `[1, D, H, W]` leaf.
    pub fn volume_input(&self, g: &mut Graph, data: &[f32]) -> Result<NodeId> {
        let grid = self.config.grid;
        if data.len() != grid.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "volume has {} voxels, the model expects {grid} ({})",
                data.len(),
                grid.voxels()
            )));
        }
        Ok(g.input(Tensor::new(vec![1, grid.d, grid.h, grid.w], data.to_vec())))
    }

    /// `E_c`: a modality-specific stem followed by shared strided blocks.
    pub fn encode_causal(&self, g: &mut Graph, x: NodeId, modality: Modality) -> CausalFeatures {
        let p = &self.params;
        let s = self.slope();
        let mut h = self.causal.stems[modality.index()].apply(g, p, x, s);
        let mut skips = vec![h];
        for (l, down) in self.causal.down.iter().enumerate() {
            h = down.apply(g, p, h, s);
            if l + 1 < self.causal.down.len() {
                skips.push(h);
            }
        }
        CausalFeatures { bottleneck: h, skips }
    }

    /// `E_bias`: strided convs, global average pooling and two affine heads.
    /// `eps` has length `L`; all zeros gives `b = mu`.
    pub fn encode_bias(&self, g: &mut Graph, x: NodeId, modality: Modality, eps: Vec<f32>) -> Result<BiasPosterior> {
        let enc = self.bias.as_ref().ok_or_else(|| missing("bias encoder"))?;
        if eps.len() != self.config.bias_dim {
            return Err(Error::ShapeMismatch(format!("eps has {} entries, L = {}", eps.len(), self.config.bias_dim)));
        }
        let p = &self.params;
        let mut h = x;
        for conv in &enc.convs {
            h = conv.apply(g, p, h);
            h = g.leaky_relu(h, self.slope());
        }
        let pooled = g.global_avg_pool(h);
        let mu = enc.mu.apply(g, p, pooled);
        let raw = enc.logvar.apply(g, p, pooled);
        let logvar = g.clamp(raw, -10.0, 10.0);
        let sample = g.reparameterize(mu, logvar, eps);
        Ok(BiasPosterior { modality, mu, logvar, sample })
    }

    /// Masked mean over the available modalities (summed in canonical order,
    /// so presentation order cannot matter), availability code, bottleneck.
    pub fn fuse(
        &self,
        g: &mut Graph,
        features: &[(Modality, &CausalFeatures)],
        availability: Availability,
    ) -> Result<Fused> {
        if availability.is_empty() {
            return Err(Error::EmptyAvailability);
        }
        let mut chosen = Vec::new();
        for m in availability.modalities() {
            let f = features.iter().find(|(fm, _)| *fm == m).map(|(_, f)| *f).ok_or_else(|| {
                Error::ShapeMismatch(format!("no causal features supplied for available modality {m}"))
            })?;
            chosen.push(f);
        }
        let mean = g.mean(&chosen.iter().map(|f| f.bottleneck).collect::<Vec<_>>());
        let skips = (0..chosen[0].skips.len())
            .map(|s| {
                let nodes: Vec<NodeId> = chosen.iter().map(|f| f.skips[s]).collect();
                g.mean(&nodes)
            })
            .collect();

        let p = &self.params;
        let shape = g.shape(mean).to_vec();
        let vox: usize = shape[1..].iter().product();
        let code: Vec<f32> = availability.code().iter().flat_map(|&c| std::iter::repeat_n(c, vox)).collect();
        let code = g.input(Tensor::new(vec![NUM_MODALITIES, shape[1], shape[2], shape[3]], code));
        let x = g.concat(&[mean, code]);
        let h = self.fusion.conv1.apply(g, p, x, self.slope());
        let h = self.fusion.conv2.apply(g, p, h);
        let h = g.standardize(h, NORM_EPS, Spread::SqrtVarEps);
        let h = self.fusion.attention.apply(g, p, h);
        let h = g.add(h, mean);
        let mediator = g.leaky_relu(h, self.slope());
        Ok(Fused { availability, mean, mediator, skips })
    }

    /// `D_seg`: U-Net style decoder with additive skips; `[K, D, H, W]` logits.
    pub fn decode_segmentation(&self, g: &mut Graph, fused: &Fused) -> Result<NodeId> {
        if fused.skips.len() != self.seg.ups.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} skip maps for a {}-level decoder",
                fused.skips.len(),
                self.seg.ups.len()
            )));
        }
        let p = &self.params;
        let mut h = fused.mediator;
        for ((up, conv), &skip) in self.seg.ups.iter().zip(fused.skips.iter().rev()) {
            h = up.apply(g, p, h);
            if g.shape(h) != g.shape(skip) {
                return Err(Error::ShapeMismatch(format!("decoder {:?} vs skip {:?}", g.shape(h), g.shape(skip))));
            }
            h = g.add(h, skip);
            h = conv.apply(g, p, h, self.slope());
        }
        Ok(self.seg.head.apply(g, p, h))
    }

    /// `D_recon`: one AdaIN-modulated block per level, one output channel.
    pub fn reconstruct(&self, g: &mut Graph, mediator: NodeId, b: NodeId) -> Result<NodeId> {
        let dec = self.recon.as_ref().ok_or_else(|| missing("reconstruction decoder"))?;
        let p = &self.params;
        let mut h = mediator;
        for (up, conv, adain) in &dec.ups {
            h = up.apply(g, p, h);
            if let Some(c) = conv {
                h = c.apply(g, p, h);
            }
            h = adain.apply(g, p, h, b);
            h = g.leaky_relu(h, self.slope());
        }
        Ok(dec.head.apply(g, p, h))
    }

    /// `A_causal = sigmoid(upsample(conv1x1(M)))`, shape `[1, D, H, W]`.
    pub fn causality_map(&self, g: &mut Graph, mediator: NodeId) -> NodeId {
        let h = self.causality.apply(g, &self.params, mediator);
        let h = g.upsample(h, self.upsample_factor);
        g.sigmoid(h)
    }

    /// `D_count`: broadcast decoder from the concatenated bias codes. Missing
    /// modalities occupy zero slots; the availability code is appended.
    pub fn counterfactual_predict(
        &self,
        g: &mut Graph,
        codes: &[(Modality, NodeId)],
        availability: Availability,
    ) -> Result<Counterfactual> {
        let dec = self.counterfactual.as_ref().ok_or_else(|| missing("counterfactual decoder"))?;
        if availability.is_empty() {
            return Err(Error::EmptyAvailability);
        }
        let l = self.config.bias_dim;
        let mut slots = Vec::with_capacity(NUM_MODALITIES + 1);
        for m in Modality::ALL {
            let node = match codes.iter().find(|(cm, _)| *cm == m) {
                Some(&(_, n)) if availability.contains(m) => {
                    if g.shape(n) != [l] {
                        return Err(Error::ShapeMismatch(format!("bias code for {m} has shape {:?}", g.shape(n))));
                    }
                    n
                }
                None if availability.contains(m) => {
                    return Err(Error::ShapeMismatch(format!("no bias code supplied for available modality {m}")))
                }
                _ => g.input(Tensor::zeros(vec![l])),
            };
            slots.push(node);
        }
        slots.push(g.input(Tensor::scalar_vec(availability.code().to_vec())));
        let b_all = g.concat(&slots);
        let p = &self.params;
        let h = dec.input.apply(g, p, b_all);
        let c = dec.coarse;
        let mut h = g.reshape(h, vec![self.config.counterfactual_width, c[0], c[1], c[2]]);
        h = g.leaky_relu(h, self.slope());
        for up in &dec.ups {
            h = up.apply(g, p, h);
            h = g.leaky_relu(h, self.slope());
        }
        if dec.tail_factor != [1, 1, 1] {
            h = g.upsample(h, dec.tail_factor);
        }
        let logits = dec.head.apply(g, p, h);
        let probs = g.softmax(logits);
        let bg = g.narrow(probs, 0, 1);
        let foreground = g.affine_scalar(bg, -1.0, 1.0);
        Ok(Counterfactual { logits, foreground })
    }

    /// Full per-sample forward pass.
    pub fn forward(&self, g: &mut Graph, inputs: &SampleInputs<'_>, heads: Heads) -> Result<SampleOutputs> {
        let avail = inputs.availability;
        if avail.is_empty() {
            return Err(Error::EmptyAvailability);
        }
        let mut input_nodes = Vec::new();
        let mut causal = Vec::new();
        for m in avail.modalities() {
            let data =
                inputs.causal[m.index()].ok_or_else(|| Error::ShapeMismatch(format!("missing volume for {m}")))?;
            let x = self.volume_input(g, data)?;
            input_nodes.push((m, x));
            causal.push((m, self.encode_causal(g, x, m)));
        }
        let refs: Vec<(Modality, &CausalFeatures)> = causal.iter().map(|(m, f)| (*m, f)).collect();
        let fused = self.fuse(g, &refs, avail)?;
        let seg_logits = self.decode_segmentation(g, &fused)?;

        let mut posteriors = Vec::new();
        let mut recon = Vec::new();
        let want_bias = heads.bias || heads.recon || heads.counterfactual;
        if want_bias {
            for m in avail.modalities() {
                let data =
                    inputs.bias[m.index()].ok_or_else(|| Error::ShapeMismatch(format!("missing volume for {m}")))?;
                let x = if std::ptr::eq(data, inputs.causal[m.index()].unwrap_or(&[])) {
                    input_nodes.iter().find(|(im, _)| *im == m).map(|(_, n)| *n).expect("encoded above")
                } else {
                    self.volume_input(g, data)?
                };
                let eps = match inputs.eps {
                    Some(e) => e[m.index()].clone(),
                    None => vec![0.0; self.config.bias_dim],
                };
                posteriors.push(self.encode_bias(g, x, m, eps)?);
            }
        }
        if heads.recon {
            for post in &posteriors {
                recon.push((post.modality, self.reconstruct(g, fused.mediator, post.sample)?));
            }
        }
        let causality = heads.causality.then(|| self.causality_map(g, fused.mediator));
        let counterfactual = if heads.counterfactual {
            let codes: Vec<(Modality, NodeId)> = posteriors.iter().map(|p| (p.modality, p.sample)).collect();
            Some(self.counterfactual_predict(g, &codes, avail)?)
        } else {
            None
        };
        Ok(SampleOutputs {
            seg_logits,
            fused,
            inputs: input_nodes,
            causal,
            posteriors,
            recon,
            causality,
            counterfactual,
        })
    }

    /// Segmentation logits `[K, D, H, W]` for one sample, using only the
    /// causal stream.
    pub fn predict(&self, volumes: &[Vec<f32>; NUM_MODALITIES], availability: Availability) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &SampleInputs::new(volumes, availability), Heads::SEGMENTATION)?;
        Ok(g.value(out.seg_logits).clone())
    }
}
