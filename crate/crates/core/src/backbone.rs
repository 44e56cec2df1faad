//! Multimodal backbones: the shared backbone with per-modality adaptors (LMA),
//! the fully independent two-stream baseline, and the unimodal model.
//!
//! All three share one layer stack description ([`BackboneConfig`]): a list of
//! blocks, each a stride-`s` conv followed by stride-1 convs, every conv
//! followed by ReLU. Features of the last layer of each modality are fused by
//! addition, globally average-pooled and classified by a linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{count_params, BoundAdaptor, LowRankAdaptor, TargetShape, DEFAULT_INIT_STD};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityId {
    pub index: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    /// Stride of the first conv in the block.
    pub stride: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    /// Block whose last layer emits this tap.
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub classes: usize,
}

fn default_modalities() -> Vec<String> {
    vec!["visible".into(), "infrared".into()]
}

fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Square input extent, used to size probe inputs.
    pub image_size: usize,
    pub blocks: Vec<BlockSpec>,
    pub taps: Vec<TapSpec>,
    pub head: HeadSpec,
    /// Adaptor rank at construction.
    #[serde(default)]
    pub rank: usize,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<String>,
    /// Standard deviation of the initial `P` and `Q` entries.
    #[serde(default = "default_init_std")]
    pub adaptor_init_std: f64,
}

/// One conv layer as laid out by a [`BackboneConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerGeometry {
    pub fn target(&self) -> TargetShape {
        TargetShape::Conv {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel: self.kernel,
        }
    }
}

impl BackboneConfig {
    /// Three blocks of (stride-2 conv + conv) with 8/16/32 channels, `K = 3`, taps P3/P4/P5.
    pub fn reference() -> Self {
        Self {
            input_channels: 4,
            image_size: 32,
            blocks: [8, 16, 32]
                .into_iter()
                .map(|channels| BlockSpec {
                    channels,
                    kernel: 3,
                    stride: 2,
                    layers: 2,
                })
                .collect(),
            taps: ["P3", "P4", "P5"]
                .into_iter()
                .enumerate()
                .map(|(block, name)| TapSpec {
                    name: name.into(),
                    block,
                })
                .collect(),
            head: HeadSpec { classes: 4 },
            rank: 6,
            modalities: default_modalities(),
            adaptor_init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn layers(&self) -> Vec<LayerGeometry> {
        let mut out = Vec::new();
        let mut c_in = self.input_channels;
        for (b, block) in self.blocks.iter().enumerate() {
            for l in 0..block.layers {
                out.push(LayerGeometry {
                    block: b,
                    in_channels: c_in,
                    out_channels: block.channels,
                    kernel: block.kernel,
                    stride: if l == 0 { block.stride } else { 1 },
                    padding: block.kernel / 2,
                });
                c_in = block.channels;
            }
        }
        out
    }

    /// Index of the last layer of each block.
    fn block_last_layers(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                acc += b.layers;
                acc - 1
            })
            .collect()
    }

    /// Problems with this configuration for adaptors of rank `rank`, one message each.
    pub fn problems(&self, rank: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_channels == 0 {
            errs.push("backbone.input_channels must be positive".into());
        }
        if self.blocks.is_empty() {
            errs.push("backbone.blocks must not be empty".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 || b.layers == 0 {
                errs.push(format!("backbone.blocks[{i}] has a zero field"));
            }
        }
        for t in &self.taps {
            if t.block >= self.blocks.len() {
                errs.push(format!("tap {} references missing block {}", t.name, t.block));
            }
        }
        if self.head.classes < 2 {
            errs.push("backbone.head.classes must be at least 2".into());
        }
        if self.modalities.is_empty() {
            errs.push("backbone.modalities must not be empty".into());
        }
        if !(self.adaptor_init_std > 0.0 && self.adaptor_init_std.is_finite()) {
            errs.push("backbone.adaptor_init_std must be positive".into());
        }
        for (i, g) in self.layers().iter().enumerate() {
            let t = g.target();
            if g.kernel > 0 && g.in_channels > 0 && rank > t.max_rank() {
                errs.push(format!(
                    "layer {i}: rank {rank} violates r < min({}, {})",
                    t.rows_out(),
                    t.rows_in()
                ));
            }
        }
        let mut size = self.image_size;
        for g in self.layers() {
            if g.kernel > size + 2 * g.padding || g.stride == 0 {
                errs.push(format!("input size {} too small for the layer stack", self.image_size));
                break;
            }
            size = (size + 2 * g.padding - g.kernel) / g.stride + 1;
        }
        errs
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        let errs = self.problems(rank);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { stride: usize, padding: usize },
    Linear,
}

/// A shared kernel plus one adaptor per modality; the bias is shared and never adapted.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLayer {
    pub kind: LayerKind,
    pub block: usize,
    weight: Tensor,
    bias: Tensor,
    adaptors: Vec<LowRankAdaptor>,
}

impl SharedLayer {
    pub fn conv(geom: &LayerGeometry, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = geom.in_channels * geom.kernel * geom.kernel;
        let weight = Tensor::randn(geom.target().dims(), (2.0 / fan_in as f64).sqrt(), rng);
        Self {
            kind: LayerKind::Conv {
                stride: geom.stride,
                padding: geom.padding,
            },
            block: geom.block,
            weight,
            bias: Tensor::zeros(vec![geom.out_channels]),
            adaptors: Vec::new(),
        }
    }

    pub fn linear(in_features: usize, out_features: usize, block: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Tensor::randn(vec![out_features, in_features], (1.0 / in_features as f64).sqrt(), rng);
        Self {
            kind: LayerKind::Linear,
            block,
            weight,
            bias: Tensor::zeros(vec![out_features]),
            adaptors: Vec::new(),
        }
    }

    pub fn from_parts(kind: LayerKind, block: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        let layer = Self {
            kind,
            block,
            weight,
            bias,
            adaptors: Vec::new(),
        };
        let dims = layer.target().dims();
        if layer.bias.shape() != [dims[0]] {
            return Err(Error::shape(
                "shared_layer",
                format!("bias {:?} for weight {:?}", layer.bias.shape(), dims),
            ));
        }
        Ok(layer)
    }

    pub fn target(&self) -> TargetShape {
        let s = self.weight.shape();
        match self.kind {
            LayerKind::Conv { .. } => TargetShape::Conv {
                out_channels: s[0],
                in_channels: s[1],
                kernel: s[2],
            },
            LayerKind::Linear => TargetShape::Linear {
                out_features: s[0],
                in_features: s[1],
            },
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn adaptors(&self) -> &[LowRankAdaptor] {
        &self.adaptors
    }

    pub fn adaptors_mut(&mut self) -> &mut [LowRankAdaptor] {
        &mut self.adaptors
    }

    pub fn push_adaptor(&mut self, adaptor: LowRankAdaptor) -> Result<()> {
        if adaptor.target() != self.target() {
            return Err(Error::shape(
                "shared_layer",
                format!("adaptor target {:?} vs layer {:?}", adaptor.target(), self.target()),
            ));
        }
        self.adaptors.push(adaptor);
        Ok(())
    }

    /// Effective kernel for `modality`: shared plus that modality's adaptor, if any.
    pub fn merged_weight(&self, modality: Option<usize>) -> Result<Tensor> {
        match modality.and_then(|m| self.adaptors.get(m)) {
            Some(a) => crate::adaptor::merged_kernel(&self.weight, a),
            None => Ok(self.weight.clone()),
        }
    }

    /// Applies this layer (without activation) with an explicit kernel and optional bias.
    pub fn apply(&self, x: &Tensor, kernel: &Tensor, with_bias: bool) -> Result<Tensor> {
        let bias = with_bias.then_some(&self.bias);
        match self.kind {
            LayerKind::Conv { stride, padding } => ops::conv2d(x, kernel, bias, stride, padding),
            LayerKind::Linear => ops::linear(x, kernel, bias),
        }
    }

    fn record(&self, tape: &mut Tape, bound: &BoundLayer, x: Var, modality: Option<usize>) -> Result<Var> {
        let kernel = match modality.and_then(|m| self.adaptors.get(m).map(|a| (a, bound.adaptors[m]))) {
            Some((adaptor, b)) => {
                let k_ada = adaptor.record_kernel(tape, &b)?;
                tape.add(bound.weight, k_ada)?
            }
            None => bound.weight,
        };
        match self.kind {
            LayerKind::Conv { stride, padding } => tape.conv2d(x, kernel, Some(bound.bias), stride, padding),
            LayerKind::Linear => tape.linear(x, kernel, Some(bound.bias)),
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
            adaptors: self.adaptors.iter().map(|a| a.bind(tape)).collect(),
        }
    }

    /// Stored scalars of the shared kernel and bias.
    pub fn shared_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn adaptor_params(&self) -> usize {
        self.adaptors.iter().map(|a| a.stored_params()).sum()
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    weight: Var,
    bias: Var,
    adaptors: Vec<BoundAdaptor>,
}

/// Tape handles for every parameter of a model, plus the flat canonical order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    streams: Vec<Vec<BoundLayer>>,
    head: BoundLayer,
    order: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Shared backbone plus low-rank modal adaptors.
    Lma,
    /// One independent backbone per modality.
    TwoStream,
    /// One backbone, first modality only.
    Unimodal,
}

/// Role of a parameter tensor, reported alongside its canonical name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    SharedWeight,
    Bias,
    HeadWeight,
    AdaptorP { adaptor: usize },
    AdaptorLambda { adaptor: usize },
    AdaptorQ { adaptor: usize },
}

impl ParamRole {
    pub fn adaptor(&self) -> Option<usize> {
        match *self {
            ParamRole::AdaptorP { adaptor }
            | ParamRole::AdaptorLambda { adaptor }
            | ParamRole::AdaptorQ { adaptor } => Some(adaptor),
            _ => None,
        }
    }
}

/// A paired multimodal mini-batch: one `[N, C, H, W]` tensor per modality.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// Output of [`MultimodalModel::forward_modality`].
#[derive(Clone, Debug)]
pub struct ModalityForward {
    /// Post-activation features per tap, in config order.
    pub taps: Vec<(String, Tensor)>,
    /// Head applied to this modality's deepest features alone.
    pub logits: Tensor,
}

/// One layer of [`MultimodalModel::forward_split`], all pre-activation.
#[derive(Clone, Debug)]
pub struct SplitLayer {
    pub layer: usize,
    pub tap: Option<String>,
    /// Shared kernel plus bias.
    pub shared: Tensor,
    /// Adaptor kernel alone (zero when the layer has no adaptor).
    pub adaptor: Tensor,
    /// Pre-activation of the merged kernel.
    pub merged: Tensor,
}

/// A built model of any [`Architecture`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalModel {
    config: BackboneConfig,
    architecture: Architecture,
    streams: Vec<Vec<SharedLayer>>,
    head: SharedLayer,
}

impl MultimodalModel {
    fn base(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> (Vec<SharedLayer>, SharedLayer) {
        let layers: Vec<SharedLayer> = config.layers().iter().map(|g| SharedLayer::conv(g, rng)).collect();
        let feat = config.blocks.last().map_or(config.input_channels, |b| b.channels);
        let head = SharedLayer::linear(feat, config.head.classes, config.blocks.len(), rng);
        (layers, head)
    }

    /// Shared backbone with one adaptor per modality per layer, `Λ = 0` at start.
    ///
    /// For a given seed the shared weights and head equal those of
    /// [`Self::build_unimodal`] and of every stream of [`build_two_stream`].
    pub fn build_lma(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(config.rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut layers, head) = Self::base(config, &mut rng);
        for layer in &mut layers {
            for _ in 0..config.modality_count() {
                let a = LowRankAdaptor::zero_start(layer.target(), config.rank, config.adaptor_init_std, &mut rng)?;
                layer.push_adaptor(a)?;
            }
        }
        Ok(Self {
            config: config.clone(),
            architecture: Architecture::Lma,
            streams: vec![layers],
            head,
        })
    }

    pub fn build_unimodal(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, head) = Self::base(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            architecture: Architecture::Unimodal,
            streams: vec![layers],
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn modality_count(&self) -> usize {
        self.config.modality_count()
    }

    pub fn modality(&self, index: usize) -> Result<ModalityId> {
        self.config
            .modalities
            .get(index)
            .map(|name| ModalityId {
                index,
                name: name.clone(),
            })
            .ok_or(Error::UnknownModality {
                index,
                count: self.modality_count(),
            })
    }

    /// Modalities consumed by the forward pass.
    pub fn input_modalities(&self) -> usize {
        match self.architecture {
            Architecture::Unimodal => 1,
            _ => self.modality_count(),
        }
    }

    pub fn streams(&self) -> &[Vec<SharedLayer>] {
        &self.streams
    }

    pub fn streams_mut(&mut self) -> &mut [Vec<SharedLayer>] {
        &mut self.streams
    }

    pub fn head(&self) -> &SharedLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut SharedLayer {
        &mut self.head
    }

    /// Adaptors in canonical order `k = layer · M + modality` (LMA only; empty otherwise).
    pub fn adaptors(&self) -> impl Iterator<Item = &LowRankAdaptor> {
        self.streams.iter().flatten().flat_map(|l| l.adaptors.iter())
    }

    pub fn adaptors_mut(&mut self) -> impl Iterator<Item = &mut LowRankAdaptor> {
        self.streams.iter_mut().flatten().flat_map(|l| l.adaptors.iter_mut())
    }

    /// Block index of each adaptor in canonical order.
    pub fn adaptor_blocks(&self) -> Vec<usize> {
        self.streams
            .iter()
            .flatten()
            .flat_map(|l| std::iter::repeat_n(l.block, l.adaptors.len()))
            .collect()
    }

    /// Parameter-name prefix of each adaptor in canonical order, e.g. `s0.l2.ada1`.
    pub fn adaptor_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (s, stream) in self.streams.iter().enumerate() {
            for (l, layer) in stream.iter().enumerate() {
                out.extend((0..layer.adaptors.len()).map(|m| format!("s{s}.l{l}.ada{m}")));
            }
        }
        out
    }

    pub fn adaptor_count(&self) -> usize {
        self.adaptors().count()
    }

    pub fn active_rank_total(&self) -> usize {
        self.adaptors().map(|a| a.active_rank()).sum()
    }

    fn stream_index(&self, modality: usize) -> usize {
        match self.architecture {
            Architecture::TwoStream => modality,
            _ => 0,
        }
    }

    fn adaptor_slot(&self, modality: usize) -> Option<usize> {
        match self.architecture {
            Architecture::Lma => Some(modality),
            _ => None,
        }
    }

    fn check_modality(&self, modality: usize) -> Result<()> {
        if modality >= self.input_modalities() {
            return Err(Error::UnknownModality {
                index: modality,
                count: self.input_modalities(),
            });
        }
        Ok(())
    }

    /// Adds adaptors for a new modality to every layer (LMA only).
    pub fn add_modality(&mut self, name: &str, seed: u64) -> Result<ModalityId> {
        if self.architecture != Architecture::Lma {
            return Err(Error::InvalidArgument("only LMA models take additional modalities".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rank, std) = (self.config.rank, self.config.adaptor_init_std);
        for layer in self.streams.iter_mut().flatten() {
            let a = LowRankAdaptor::zero_start(layer.target(), rank, std, &mut rng)?;
            layer.push_adaptor(a)?;
        }
        self.config.modalities.push(name.to_string());
        self.modality(self.modality_count() - 1)
    }

    /// Pushes every parameter onto `tape` in canonical order (see [`Self::params`]).
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let streams: Vec<Vec<BoundLayer>> = self
            .streams
            .iter()
            .map(|s| s.iter().map(|l| l.bind(tape)).collect())
            .collect();
        let head = self.head.bind(tape);
        let mut order = Vec::new();
        for layer in streams.iter().flatten().chain(std::iter::once(&head)) {
            order.push(layer.weight);
            order.push(layer.bias);
            for a in &layer.adaptors {
                order.extend([a.p, a.lambda, a.q]);
            }
        }
        BoundModel { streams, head, order }
    }

    /// Wraps leaves already on a tape, given in canonical order, as a [`BoundModel`].
    pub fn bind_with(&self, vars: &[Var]) -> Result<BoundModel> {
        let mut it = vars.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::InvalidArgument("fewer leaves than model parameters".into()))
        };
        let mut layer = |l: &SharedLayer| -> Result<BoundLayer> {
            let weight = next()?;
            let bias = next()?;
            let adaptors = l
                .adaptors
                .iter()
                .map(|_| {
                    Ok(BoundAdaptor {
                        p: next()?,
                        lambda: next()?,
                        q: next()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BoundLayer { weight, bias, adaptors })
        };
        let streams = self
            .streams
            .iter()
            .map(|s| s.iter().map(&mut layer).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let head = layer(&self.head)?;
        if vars.len() != self.params_len() {
            return Err(Error::InvalidArgument("more leaves than model parameters".into()));
        }
        Ok(BoundModel {
            streams,
            head,
            order: vars.to_vec(),
        })
    }

    fn params_len(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, _| n += 1);
        n
    }

    /// Visits `(name, role, tensor)` for every parameter in canonical order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, ParamRole, &Tensor)) {
        let mut k = 0;
        for (s, stream) in self.streams.iter().enumerate() {
            for (l, layer) in stream.iter().enumerate() {
                f(&format!("s{s}.l{l}.weight"), ParamRole::SharedWeight, &layer.weight);
                f(&format!("s{s}.l{l}.bias"), ParamRole::Bias, &layer.bias);
                for (m, a) in layer.adaptors.iter().enumerate() {
                    f(&format!("s{s}.l{l}.ada{m}.P"), ParamRole::AdaptorP { adaptor: k }, a.p());
                    f(&format!("s{s}.l{l}.ada{m}.Lambda"), ParamRole::AdaptorLambda { adaptor: k }, a.lambda());
                    f(&format!("s{s}.l{l}.ada{m}.Q"), ParamRole::AdaptorQ { adaptor: k }, a.q());
                    k += 1;
                }
            }
        }
        f("head.weight", ParamRole::HeadWeight, &self.head.weight);
        f("head.bias", ParamRole::Bias, &self.head.bias);
    }

    /// Mutable counterpart of [`Self::visit_params`], same order and names.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, ParamRole, &mut Tensor)) {
        let mut k = 0;
        for (s, stream) in self.streams.iter_mut().enumerate() {
            for (l, layer) in stream.iter_mut().enumerate() {
                f(&format!("s{s}.l{l}.weight"), ParamRole::SharedWeight, &mut layer.weight);
                f(&format!("s{s}.l{l}.bias"), ParamRole::Bias, &mut layer.bias);
                for (m, a) in layer.adaptors.iter_mut().enumerate() {
                    f(&format!("s{s}.l{l}.ada{m}.P"), ParamRole::AdaptorP { adaptor: k }, a.p_mut());
                    f(
                        &format!("s{s}.l{l}.ada{m}.Lambda"),
                        ParamRole::AdaptorLambda { adaptor: k },
                        a.lambda_mut(),
                    );
                    f(&format!("s{s}.l{l}.ada{m}.Q"), ParamRole::AdaptorQ { adaptor: k }, a.q_mut());
                    k += 1;
                }
            }
        }
        f("head.weight", ParamRole::HeadWeight, &mut self.head.weight);
        f("head.bias", ParamRole::Bias, &mut self.head.bias);
    }

    /// `(name, tensor)` pairs in canonical order (cloned).
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(|name, _, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Records the backbone for one modality. Returns post-activation features
    /// at every tap and the final layer's features.
    pub fn record_stream(&self, tape: &mut Tape, bound: &BoundModel, x: Var, modality: usize) -> Result<(Vec<Var>, Var)> {
        self.check_modality(modality)?;
        let s = self.stream_index(modality);
        let slot = self.adaptor_slot(modality);
        let last = self.config.block_last_layers();
        let mut taps = vec![None; self.config.taps.len()];
        let mut h = x;
        for (l, layer) in self.streams[s].iter().enumerate() {
            let pre = layer.record(tape, &bound.streams[s][l], h, slot)?;
            h = tape.relu(pre);
            for (t, tap) in self.config.taps.iter().enumerate() {
                if last[tap.block] == l {
                    taps[t] = Some(h);
                }
            }
        }
        Ok((taps.into_iter().map(|t| t.expect("validated taps")).collect(), h))
    }

    /// Pool and classify already-fused deepest features.
    pub fn record_head(&self, tape: &mut Tape, bound: &BoundModel, fused: Var) -> Result<Var> {
        let pooled = tape.avg_pool_global(fused)?;
        self.head.record(tape, &bound.head, pooled, None)
    }

    /// Records the full multimodal forward; returns logits.
    pub fn record_logits(&self, tape: &mut Tape, bound: &BoundModel, inputs: &[Var]) -> Result<Var> {
        let m = self.input_modalities();
        if inputs.len() < m {
            return Err(Error::InvalidArgument(format!(
                "model consumes {} modalities, batch has {}",
                m,
                inputs.len()
            )));
        }
        let mut fused: Option<Var> = None;
        for (modality, &x) in inputs.iter().enumerate().take(m) {
            let (_, deep) = self.record_stream(tape, bound, x, modality)?;
            fused = Some(match fused {
                None => deep,
                Some(f) => tape.add(f, deep)?,
            });
        }
        self.record_head(tape, bound, fused.expect("at least one modality"))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.len() < self.input_modalities() {
            return Err(Error::InvalidArgument(format!(
                "model consumes {} modalities, batch has {}",
                self.input_modalities(),
                batch.inputs.len()
            )));
        }
        if batch.inputs.iter().any(|x| x.shape().first() != Some(&batch.labels.len())) {
            return Err(Error::shape("batch", "inputs and labels disagree on batch size"));
        }
        Ok(())
    }

    /// Forward, loss and backward on `batch`; stores gradients on every parameter tensor.
    pub fn loss_and_grads(&mut self, batch: &Batch) -> Result<BatchStats> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let inputs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let logits = self.record_logits(&mut tape, &bound, &inputs)?;
        let correct = count_correct(tape.value(logits), &batch.labels);
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).item();
        let mut i = 0;
        let order = bound.order;
        self.visit_params_mut(|_, _, t| {
            let g = tape.grad(order[i]).expect("param leaf").to_vec();
            t.set_grad(g).expect("same shape");
            i += 1;
        });
        Ok(BatchStats {
            loss: loss_value,
            correct,
            count: batch.labels.len(),
        })
    }

    /// Fused logits without recording gradients.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let logits = self.record_logits(&mut tape, &bound, &vars)?;
        Ok(tape.value(logits).clone())
    }

    /// Features of one modality with its merged kernels, plus head logits on them alone.
    pub fn forward_modality(&self, x: &Tensor, modality: usize) -> Result<ModalityForward> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (taps, deep) = self.record_stream(&mut tape, &bound, xv, modality)?;
        let logits = self.record_head(&mut tape, &bound, deep)?;
        Ok(ModalityForward {
            taps: self
                .config
                .taps
                .iter()
                .zip(taps)
                .map(|(t, v)| (t.name.clone(), tape.value(v).clone()))
                .collect(),
            logits: tape.value(logits).clone(),
        })
    }

    /// Runs the shared and adaptor branches of every layer separately.
    ///
    /// The next layer consumes `relu(shared + adaptor)`, i.e. the merged forward.
    pub fn forward_split(&self, x: &Tensor, modality: usize) -> Result<Vec<SplitLayer>> {
        self.check_modality(modality)?;
        let s = self.stream_index(modality);
        let slot = self.adaptor_slot(modality);
        let last = self.config.block_last_layers();
        let mut h = x.clone();
        let mut out = Vec::new();
        for (l, layer) in self.streams[s].iter().enumerate() {
            let shared = layer.apply(&h, &layer.weight, true)?;
            let adaptor = match slot.and_then(|m| layer.adaptors.get(m)) {
                Some(a) => layer.apply(&h, &a.materialize(), false)?,
                None => Tensor::zeros(shared.shape().to_vec()),
            };
            let merged = layer.apply(&h, &layer.merged_weight(slot)?, true)?;
            h = ops::relu(&merged);
            let tap = self
                .config
                .taps
                .iter()
                .find(|t| last[t.block] == l)
                .map(|t| t.name.clone());
            out.push(SplitLayer {
                layer: l,
                tap,
                shared,
                adaptor,
                merged,
            });
        }
        Ok(out)
    }

    /// Stored scalars in shared kernels, biases and head.
    pub fn shared_param_count(&self) -> usize {
        self.streams.iter().flatten().map(|l| l.shared_params()).sum::<usize>() + self.head.shared_params()
    }

    pub fn adaptor_param_count(&self) -> usize {
        self.streams.iter().flatten().map(|l| l.adaptor_params()).sum()
    }

    pub fn total_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, t| n += t.numel());
        n
    }

    /// Parameter count of the single-backbone model this one extends.
    pub fn unimodal_param_count(&self) -> usize {
        self.streams[0].iter().map(|l| l.shared_params()).sum::<usize>() + self.head.shared_params()
    }

    /// The same counts derived from layer geometry and current ranks via the closed forms.
    pub fn closed_form_counts(&self) -> ClosedFormCounts {
        let mut kernels = 0;
        let mut biases = 0;
        let mut adaptors = 0;
        for layer in self.streams.iter().flatten().chain(std::iter::once(&self.head)) {
            let (c1, c2, k) = layer.target().geometry();
            kernels += count_params(c1, c2, k, 0).shared_params;
            biases += c2;
            for a in &layer.adaptors {
                adaptors += count_params(c1, c2, k, a.rank()).adaptor_params;
            }
        }
        ClosedFormCounts {
            shared: kernels + biases,
            adaptors,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClosedFormCounts {
    pub shared: usize,
    pub adaptors: usize,
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(&logits.data()[r * k..(r + 1) * k]) == l)
        .count()
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Baseline with one independent backbone per modality, fused by addition.
///
/// Every stream starts from the same weights so that channels correspond across
/// streams; they diverge only through training.
pub fn build_two_stream(config: &BackboneConfig, seed: u64) -> Result<MultimodalModel> {
    let uni = MultimodalModel::build_unimodal(config, seed)?;
    let stream = uni.streams[0].clone();
    Ok(MultimodalModel {
        config: config.clone(),
        architecture: Architecture::TwoStream,
        streams: vec![stream; config.modality_count()],
        head: uni.head,
    })
}

/// Elementwise sum of per-modality features.
pub fn fuse(features: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("fuse of zero feature maps".into()))?;
    rest.iter().try_fold(first.clone(), |acc, f| {
        acc.add(f).map_err(|_| {
            Error::shape(
                "fuse",
                format!("feature shapes {:?} and {:?} differ", first.shape(), f.shape()),
            )
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            input_channels: 4,
            image_size: 8,
            blocks: vec![
                BlockSpec {
                    channels: 4,
                    kernel: 3,
                    stride: 2,
                    layers: 2,
                },
                BlockSpec {
                    channels: 6,
                    kernel: 3,
                    stride: 2,
                    layers: 1,
                },
            ],
            taps: vec![
                TapSpec {
                    name: "P3".into(),
                    block: 0,
                },
                TapSpec {
                    name: "P4".into(),
                    block: 1,
                },
            ],
            head: HeadSpec { classes: 3 },
            rank: 2,
            modalities: default_modalities(),
            adaptor_init_std: 0.02,
        }
    }

    #[test]
    fn reference_layer_stack() {
        let cfg = BackboneConfig::reference();
        let layers = cfg.layers();
        assert_eq!(layers.len(), 6);
        assert_eq!((layers[0].in_channels, layers[0].out_channels, layers[0].stride), (4, 8, 2));
        assert_eq!((layers[1].in_channels, layers[1].stride), (8, 1));
        assert!(cfg.problems(9).is_empty());
        // first layer: C1·K = 12, so rank 12 is rejected
        assert!(!cfg.problems(12).is_empty());
    }

    #[test]
    fn config_problems_are_enumerated_together() {
        let mut cfg = small_config();
        cfg.taps.push(TapSpec {
            name: "P9".into(),
            block: 7,
        });
        cfg.head.classes = 1;
        let errs = cfg.problems(50);
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn fresh_lma_modalities_coincide_bitwise() {
        let cfg = small_config();
        let model = MultimodalModel::build_lma(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let a = model.forward_modality(&x, 0).unwrap();
        let b = model.forward_modality(&x, 1).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        for ((_, ta), (_, tb)) in a.taps.iter().zip(&b.taps) {
            assert!(ta.bit_eq(tb));
        }
        assert!(model.forward_modality(&x, 2).is_err());
    }

    #[test]
    fn fuse_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        assert_eq!(fuse(&[a.clone(), Tensor::zeros(vec![2, 3])]).unwrap(), a);
        assert_eq!(fuse(&[a.clone(), b.clone()]).unwrap(), fuse(&[b.clone(), a.clone()]).unwrap());
        let f = fuse(&[a.clone(), b.clone()]).unwrap();
        assert!((f.mean() - (a.mean() + b.mean())).abs() < 1e-12);
        assert!(fuse(&[a, Tensor::zeros(vec![3, 2])]).is_err());
    }

    #[test]
    fn canonical_order_matches_bind() {
        let model = MultimodalModel::build_lma(&small_config(), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let params = model.params();
        assert_eq!(bound.vars().len(), params.len());
        for (v, (_, t)) in bound.vars().iter().zip(&params) {
            assert_eq!(tape.value(*v), t);
        }
    }

    #[test]
    fn storage_matches_closed_forms() {
        for cfg in [small_config(), BackboneConfig::reference()] {
            for model in [
                MultimodalModel::build_lma(&cfg, 0).unwrap(),
                build_two_stream(&cfg, 0).unwrap(),
                MultimodalModel::build_unimodal(&cfg, 0).unwrap(),
            ] {
                let cf = model.closed_form_counts();
                assert_eq!(cf.shared, model.shared_param_count());
                assert_eq!(cf.adaptors, model.adaptor_param_count());
                assert_eq!(model.total_param_count(), cf.shared + cf.adaptors);
            }
        }
    }

    #[test]
    fn adding_a_modality_costs_closed_form_adaptors() {
        let cfg = small_config();
        let mut model = MultimodalModel::build_lma(&cfg, 0).unwrap();
        let before = model.total_param_count();
        let id = model.add_modality("depth", 9).unwrap();
        assert_eq!(id.index, 2);
        let expected: usize = cfg
            .layers()
            .iter()
            .map(|g| count_params(g.in_channels, g.out_channels, g.kernel, cfg.rank).adaptor_params)
            .sum();
        assert_eq!(model.total_param_count() - before, expected);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut rng);
        assert!(model.forward_modality(&x, 2).is_ok());
    }

    #[test]
    fn unimodal_ignores_second_modality() {
        let cfg = small_config();
        let model = MultimodalModel::build_unimodal(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let y1 = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let y2 = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        let a = model.predict(&[x.clone(), y1]).unwrap();
        let b = model.predict(&[x, y2]).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(model.total_param_count(), model.unimodal_param_count());
    }

    #[test]
    fn two_stream_single_modality_equals_unimodal() {
        let mut cfg = small_config();
        cfg.modalities.truncate(1);
        let two = build_two_stream(&cfg, 8).unwrap();
        let uni = MultimodalModel::build_unimodal(&cfg, 8).unwrap();
        assert_eq!(two.params(), uni.params());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        assert!(two.predict(&[x.clone()]).unwrap().bit_eq(&uni.predict(&[x]).unwrap()));
    }
}
