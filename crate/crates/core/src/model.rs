//! Context-conditioned encoder-decoder saliency network.
//!
//! Six convolutional encoder blocks (each followed by 2x2 max pooling while
//! the resolution allows), a bottleneck that tiles a learned context vector
//! over the deepest feature map, and six mirrored decoder blocks (each
//! preceded by nearest-neighbour upsampling) with concatenated skip inputs
//! from the two deepest encoder blocks. A 1x1 convolution and a sigmoid
//! produce the attention map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::SaliencyMap;
use crate::nn::{BatchMoments, Graph, Layer, LayerSpec, Mode, NodeId, ParamId, ParamStore, BATCHNORM_MOMENTUM};
use crate::rng::{seeded, substream};
use crate::tensor::Tensor;

/// Encoder (and decoder) block count.
pub const BLOCKS: usize = 6;
/// Encoder blocks (1-based) whose output passes through dropout.
const ENCODER_DROPOUT: [usize; 2] = [4, 6];
/// Decoder blocks (1-based) whose output passes through dropout.
const DECODER_DROPOUT: [usize; 3] = [1, 2, 3];

/// Initial bias of the output convolution. sigmoid(-2.5) ≈ 0.076 sits near
/// a typical ground-truth pixel value. Starting the output at 0.5 makes the
/// first updates pull every pixel down at once, and some initializations
/// never recover from that.
pub const OUTPUT_BIAS_INIT: f64 = -2.5;

const BN_MEAN: &str = "ctx.bn.running_mean";
const BN_VAR: &str = "ctx.bn.running_var";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side length in pixels.
    pub input_size: usize,
    /// Output channels of encoder blocks 1..=6.
    pub channel_widths: Vec<usize>,
    /// Number of encoder blocks followed by pooling (the first ones).
    pub pool_stages: usize,
    pub context_enabled: bool,
    pub embedding_dim: usize,
    pub dropout_p: f64,
    pub context_categories: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a square input of side `input_size`. Pooling
    /// stages are capped by the power of two dividing the size.
    pub fn desk(input_size: usize) -> Self {
        Self {
            input_size,
            channel_widths: vec![8, 16, 32, 32, 64, 64],
            pool_stages: (input_size.trailing_zeros() as usize).min(BLOCKS),
            context_enabled: true,
            embedding_dim: 16,
            dropout_p: 0.5,
            context_categories: ContextAttributes::CATEGORIES,
            kernel_size: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_widths.len() != BLOCKS {
            return bad(format!("expected {BLOCKS} channel widths, got {}", self.channel_widths.len()));
        }
        if self.channel_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.pool_stages > BLOCKS {
            return bad(format!("at most {BLOCKS} pooling stages"));
        }
        if self.input_size == 0 || self.input_size % (1 << self.pool_stages) != 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.pool_stages
            ));
        }
        if self.embedding_dim == 0 || self.context_categories == 0 {
            return bad("embedding dimension and context categories must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_p));
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel size must be odd for same padding".into());
        }
        Ok(())
    }

    /// Side length of the bottleneck grid.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.pool_stages
    }

    fn encoder_pools(&self, block: usize) -> bool {
        block <= self.pool_stages
    }

    /// Decoder block `k` mirrors encoder block `7 - k` and upsamples where
    /// that block pooled.
    fn decoder_upsamples(&self, block: usize) -> bool {
        self.encoder_pools(BLOCKS + 1 - block)
    }

    fn decoder_out_channels(&self, block: usize) -> usize {
        let w = &self.channel_widths;
        match block {
            6 => w[0],
            k => w[BLOCKS - 1 - k],
        }
    }

    /// Encoder block whose (pre-pool) output is concatenated into decoder
    /// block `k`: the deepest block feeds decoder block 1 and the next one
    /// decoder block 2.
    fn skip_source(block: usize) -> Option<usize> {
        match block {
            1 => Some(6),
            2 => Some(5),
            _ => None,
        }
    }

    /// Every layer with trainable tensors, with its parameter prefix.
    pub fn layers(&self) -> Vec<(String, LayerSpec)> {
        let w = &self.channel_widths;
        let k = self.kernel_size;
        let mut out = Vec::new();
        let mut in_ch = 3;
        for (i, &width) in w.iter().enumerate() {
            out.push((format!("enc{}.conv", i + 1), LayerSpec::conv_same(in_ch, width, k)));
            in_ch = width;
        }
        if self.context_enabled {
            let e = self.embedding_dim;
            out.push(("ctx.embed".into(), LayerSpec::Embedding { categories: self.context_categories, dim: e }));
            out.push(("ctx.fc".into(), LayerSpec::Dense { in_features: e, out_features: e }));
            out.push(("ctx.bn".into(), LayerSpec::BatchNorm { channels: e }));
            in_ch += e;
        }
        for block in 1..=BLOCKS {
            if let Some(src) = Self::skip_source(block) {
                in_ch += w[src - 1];
            }
            let o = self.decoder_out_channels(block);
            out.push((format!("dec{block}.conv"), LayerSpec::conv_same(in_ch, o, k)));
            in_ch = o;
        }
        out.push(("out.conv".into(), LayerSpec::conv_same(in_ch, 1, 1)));
        out
    }
}

/// Experimental context: time pressure and risk preference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextAttributes {
    pub time_pressure: bool,
    pub high_risk: bool,
}

impl ContextAttributes {
    pub const CATEGORIES: usize = 4;

    pub fn new(time_pressure: bool, high_risk: bool) -> Self {
        Self { time_pressure, high_risk }
    }

    /// `2 * time_pressure + riskiness`.
    pub fn category_index(self) -> usize {
        2 * usize::from(self.time_pressure) + usize::from(self.high_risk)
    }

    pub fn from_index(index: usize) -> Result<Self> {
        if index >= Self::CATEGORIES {
            return Err(Error::Context(format!("category index {index} outside 0..4")));
        }
        Ok(Self::new(index >= 2, index % 2 == 1))
    }

    pub fn all() -> [Self; 4] {
        [0, 1, 2, 3].map(|i| Self::from_index(i).expect("in range"))
    }
}

impl fmt::Display for ContextAttributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tp = if self.time_pressure { "yes" } else { "no" };
        let risk = if self.high_risk { "high" } else { "low" };
        write!(f, "{tp},{risk}")
    }
}

/// Parses `yes|no,high|low`.
impl FromStr for ContextAttributes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (tp, risk) = s
            .split_once(',')
            .ok_or_else(|| Error::Context(format!("expected `yes|no,high|low`, got `{s}`")))?;
        let time_pressure = match tp.trim() {
            "yes" => true,
            "no" => false,
            other => return Err(Error::Context(format!("time pressure must be yes or no, got `{other}`"))),
        };
        let high_risk = match risk.trim() {
            "high" => true,
            "low" => false,
            other => return Err(Error::Context(format!("riskiness must be high or low, got `{other}`"))),
        };
        Ok(Self::new(time_pressure, high_risk))
    }
}

/// Trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Non-trainable buffers (batch-norm running mean and variance).
    pub buffers: Vec<(String, Tensor)>,
}

/// Node ids produced by [`forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub output: NodeId,
    pub context_bn: Option<NodeId>,
}

impl ForwardNodes {
    /// Train-mode statistics of the context batch norm, if any.
    pub fn context_moments(&self, graph: &Graph<'_>) -> Option<BatchMoments> {
        self.context_bn.and_then(|n| graph.batch_moments(n)).cloned()
    }
}

/// Builds a freshly initialized network (He initialization from
/// `config.seed`, output bias [`OUTPUT_BIAS_INIT`]), with every parameter
/// rounded to `f32`.
pub fn build_model(config: &ModelConfig) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = substream(config.seed, "init");
    let mut store = ParamStore::new();
    let mut buffers = Vec::new();
    for (prefix, spec) in config.layers() {
        let mut layer = Layer::init(spec, &mut rng)?;
        if prefix == "out.conv" {
            layer.params[1].data_mut().fill(OUTPUT_BIAS_INIT);
        }
        for p in &mut layer.params {
            p.round_to_f32();
        }
        layer.register(&mut store, &prefix)?;
        if let Some((mean, var)) = layer.running {
            buffers.push((BN_MEAN.to_string(), mean));
            buffers.push((BN_VAR.to_string(), var));
        }
    }
    Ok(NetworkParams {
        config: config.clone(),
        store,
        buffers,
    })
}

impl NetworkParams {
    fn id(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::Config(format!("network has no parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Rounds parameters and buffers to `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.store.tensors_mut() {
            t.round_to_f32();
        }
        for (_, t) in &mut self.buffers {
            t.round_to_f32();
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, moments: &BatchMoments) {
        if moments.count < 2 {
            return;
        }
        let unbias = moments.count as f64 / (moments.count as f64 - 1.0);
        if let Some(mean) = self.buffer_mut(BN_MEAN) {
            for (r, m) in mean.data_mut().iter_mut().zip(&moments.mean) {
                *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * m;
            }
        }
        if let Some(var) = self.buffer_mut(BN_VAR) {
            for (r, v) in var.data_mut().iter_mut().zip(&moments.var) {
                *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * v * unbias;
            }
        }
    }
}

fn conv_geometry(config: &ModelConfig) -> crate::nn::ConvGeometry {
    crate::nn::ConvGeometry {
        kernel: config.kernel_size,
        stride: 1,
        padding: config.kernel_size / 2,
    }
}

/// Appends the network to `graph`. `images` is `[N, 3, H, W]`; `contexts`
/// holds one category index per batch item and must be present exactly when
/// the network is context-enabled.
pub fn forward_graph(
    graph: &mut Graph<'_>,
    net: &NetworkParams,
    images: NodeId,
    contexts: Option<&[usize]>,
) -> Result<ForwardNodes> {
    let cfg = &net.config;
    let (n, c, h, w) = graph.value(images).dims4()?;
    if c != 3 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::Shape(format!(
            "expected images [N, 3, {s}, {s}], got {:?}",
            graph.value(images).shape(),
            s = cfg.input_size
        )));
    }
    match (cfg.context_enabled, contexts) {
        (true, None) => return Err(Error::Context("this model requires context attributes".into())),
        (false, Some(_)) => {
            return Err(Error::Context("context supplied to a model trained without context".into()))
        }
        (true, Some(idx)) if idx.len() != n => {
            return Err(Error::Shape(format!("{} context labels for a batch of {n}", idx.len())))
        }
        _ => {}
    }
    let geom = conv_geometry(cfg);
    let p = cfg.dropout_p;

    let mut x = images;
    let mut skips = Vec::with_capacity(BLOCKS);
    for block in 1..=BLOCKS {
        x = graph.conv2d(x, net.id(&format!("enc{block}.conv.w"))?, net.id(&format!("enc{block}.conv.b"))?, geom)?;
        x = graph.relu(x)?;
        if ENCODER_DROPOUT.contains(&block) {
            x = graph.dropout(x, p)?;
        }
        skips.push(x);
        if cfg.encoder_pools(block) {
            x = graph.maxpool2(x)?;
        }
    }

    let mut context_bn = None;
    if let Some(idx) = contexts {
        let side = cfg.bottleneck_size();
        let e = graph.embedding(net.id("ctx.embed.table")?, idx)?;
        let e = graph.dense(e, net.id("ctx.fc.w")?, net.id("ctx.fc.b")?)?;
        let e = graph.dropout(e, p)?;
        let mean = net.buffer(BN_MEAN).ok_or_else(|| Error::Config("missing running mean".into()))?;
        let var = net.buffer(BN_VAR).ok_or_else(|| Error::Config("missing running variance".into()))?;
        let e = graph.batchnorm(e, net.id("ctx.bn.gamma")?, net.id("ctx.bn.beta")?, mean, var, crate::nn::BATCHNORM_EPS)?;
        context_bn = Some(e);
        let tiled = graph.tile(e, side, side)?;
        x = graph.concat_channels(x, tiled)?;
    }

    for block in 1..=BLOCKS {
        if cfg.decoder_upsamples(block) {
            x = graph.upsample2(x)?;
        }
        if let Some(src) = ModelConfig::skip_source(block) {
            x = graph.concat_channels(x, skips[src - 1])?;
        }
        x = graph.conv2d(x, net.id(&format!("dec{block}.conv.w"))?, net.id(&format!("dec{block}.conv.b"))?, geom)?;
        x = graph.relu(x)?;
        if DECODER_DROPOUT.contains(&block) {
            x = graph.dropout(x, p)?;
        }
    }
    let pointwise = crate::nn::ConvGeometry { kernel: 1, stride: 1, padding: 0 };
    x = graph.conv2d(x, net.id("out.conv.w")?, net.id("out.conv.b")?, pointwise)?;
    let output = graph.sigmoid(x)?;
    Ok(ForwardNodes { output, context_bn })
}

fn check_image(image: &Tensor, size: usize) -> Result<()> {
    image.expect_shape(&[3, size, size])?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Shape("image values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Predicts one attention map from a `[3, H, W]` image. `seed` drives the
/// dropout masks in train and MC modes.
pub fn forward(
    net: &NetworkParams,
    image: &Tensor,
    context: Option<ContextAttributes>,
    mode: Mode,
    seed: u64,
) -> Result<SaliencyMap> {
    let size = net.config.input_size;
    check_image(image, size)?;
    let batch = image.clone().reshape(&[1, 3, size, size])?;
    let idx = context.map(|c| [c.category_index()]);
    let mut graph = Graph::new(&net.store, mode, vec![seeded(seed)]);
    let x = graph.input(batch)?;
    let nodes = forward_graph(&mut graph, net, x, idx.as_ref().map(|i| &i[..]))?;
    SaliencyMap::from_tensor(graph.value(nodes.output))
}

/// Batched prediction: `images` is `[N, 3, H, W]`, item `i` draws dropout
/// masks from `seeds[i]`, so results equal per-item [`forward`] calls.
pub fn forward_batch(
    net: &NetworkParams,
    images: Tensor,
    contexts: Option<&[usize]>,
    mode: Mode,
    seeds: &[u64],
) -> Result<Vec<SaliencyMap>> {
    let (n, _, h, w) = images.dims4()?;
    if seeds.len() != n {
        return Err(Error::Shape(format!("{} seeds for a batch of {n}", seeds.len())));
    }
    let mut graph = Graph::new(&net.store, mode, seeds.iter().map(|&s| seeded(s)).collect());
    let x = graph.input(images)?;
    let nodes = forward_graph(&mut graph, net, x, contexts)?;
    let out = graph.value(nodes.output);
    out.data()
        .chunks(h * w)
        .map(|chunk| SaliencyMap::new(h, w, chunk.to_vec()))
        .collect()
}
