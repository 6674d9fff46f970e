//! Minimal dense-tensor engine: layer kernels, a reverse-mode tape, Adam and
//! finite-difference gradient checking.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with, weighted_sum_head, GradCheckReport};
pub use graph::{BatchMoments, Gradients, Graph, Mode, NodeId, ParamId, ParamStore};
pub use kernels::ConvGeometry;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Layer inventory of the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    },
    MaxPool2,
    UpsampleNearest2,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Embedding {
        categories: usize,
        dim: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Dropout {
        p: f64,
    },
    Relu,
    Sigmoid,
    ConcatChannels,
}

impl LayerSpec {
    /// "Same"-padded stride-1 convolution.
    pub fn conv_same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            geometry: ConvGeometry {
                kernel,
                stride: 1,
                padding: kernel / 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, geometry } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel", geometry.kernel)?;
                positive("stride", geometry.stride)
            }
            LayerSpec::Dense { in_features, out_features } => {
                positive("in_features", in_features)?;
                positive("out_features", out_features)
            }
            LayerSpec::Embedding { categories, dim } => {
                positive("categories", categories)?;
                positive("dim", dim)
            }
            LayerSpec::BatchNorm { channels } => positive("channels", channels),
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::Config(format!("dropout rate {p} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Number of tensor inputs the layer consumes.
    pub fn arity(&self) -> usize {
        match self {
            LayerSpec::ConcatChannels => 2,
            _ => 1,
        }
    }

    /// Output shape as a pure function of the input shapes.
    ///
    /// Conv: `(H + 2p - k) / s + 1`; maxpool2: `H / 2` (floor); upsample:
    /// `2H`; dense `[N, in] -> [N, out]`; embedding `[N] -> [N, dim]`;
    /// concat sums channel counts; everything else preserves shape.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        self.validate()?;
        if inputs.len() != self.arity() {
            return Err(Error::Shape(format!("{self:?} takes {} inputs", self.arity())));
        }
        let s = inputs[0];
        let four = |s: &[usize]| -> Result<(usize, usize, usize, usize)> {
            match s[..] {
                [n, c, h, w] => Ok((n, c, h, w)),
                _ => Err(Error::Shape(format!("expected [N, C, H, W], got {s:?}"))),
            }
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, geometry } => {
                let (n, c, h, w) = four(s)?;
                if c != in_channels {
                    return Err(Error::Shape(format!("conv expects {in_channels} channels, got {c}")));
                }
                let (ho, wo) = geometry.output_hw(h, w)?;
                Ok(vec![n, out_channels, ho, wo])
            }
            LayerSpec::MaxPool2 => {
                let (n, c, h, w) = four(s)?;
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!("maxpool2 needs at least 2x2, got {h}x{w}")));
                }
                Ok(vec![n, c, h / 2, w / 2])
            }
            LayerSpec::UpsampleNearest2 => {
                let (n, c, h, w) = four(s)?;
                Ok(vec![n, c, 2 * h, 2 * w])
            }
            LayerSpec::Dense { in_features, out_features } => match s[..] {
                [n, f] if f == in_features => Ok(vec![n, out_features]),
                _ => Err(Error::Shape(format!("dense expects [N, {in_features}], got {s:?}"))),
            },
            LayerSpec::Embedding { dim, .. } => match s[..] {
                [n] => Ok(vec![n, dim]),
                _ => Err(Error::Shape(format!("embedding expects [N] indices, got {s:?}"))),
            },
            LayerSpec::BatchNorm { channels } => match s {
                [_, c] | [_, c, _, _] if *c == channels => Ok(s.to_vec()),
                _ => Err(Error::Shape(format!("batch-norm expects {channels} channels, got {s:?}"))),
            },
            LayerSpec::ConcatChannels => {
                let b = inputs[1];
                if s.len() < 2 || s.len() != b.len() || s[0] != b[0] || s[2..] != b[2..] {
                    return Err(Error::Shape(format!("cannot concatenate {s:?} and {b:?}")));
                }
                let mut out = s.to_vec();
                out[1] += b[1];
                Ok(out)
            }
            LayerSpec::Dropout { .. } | LayerSpec::Relu | LayerSpec::Sigmoid => Ok(s.to_vec()),
        }
    }

    /// Shapes of the trainable tensors, in registration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, geometry } => vec![
                ("w", vec![out_channels, in_channels, geometry.kernel, geometry.kernel]),
                ("b", vec![out_channels]),
            ],
            LayerSpec::Dense { in_features, out_features } => {
                vec![("w", vec![out_features, in_features]), ("b", vec![out_features])]
            }
            LayerSpec::Embedding { categories, dim } => vec![("table", vec![categories, dim])],
            LayerSpec::BatchNorm { channels } => vec![("gamma", vec![channels]), ("beta", vec![channels])],
            _ => Vec::new(),
        }
    }

    /// He (fan-in) initialization for weights, zero biases, unit-normal
    /// embeddings, identity batch-norm.
    pub fn init_params(&self, rng: &mut Rng) -> Result<Vec<Tensor>> {
        let fan_in_init = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            normal_tensor(shape, std, rng)
        };
        Ok(match *self {
            LayerSpec::Conv2d { in_channels, out_channels, geometry } => {
                let k = geometry.kernel;
                vec![
                    fan_in_init(&[out_channels, in_channels, k, k], in_channels * k * k, rng)?,
                    Tensor::zeros(&[out_channels]),
                ]
            }
            LayerSpec::Dense { in_features, out_features } => vec![
                fan_in_init(&[out_features, in_features], in_features, rng)?,
                Tensor::zeros(&[out_features]),
            ],
            LayerSpec::Embedding { categories, dim } => vec![normal_tensor(&[categories, dim], 1.0, rng)?],
            LayerSpec::BatchNorm { channels } => vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])],
            _ => Vec::new(),
        })
    }

    /// Appends this layer to `graph`. `params` are the ids returned when the
    /// layer's tensors were registered; `running` carries batch-norm running
    /// statistics.
    pub fn apply(
        &self,
        graph: &mut Graph<'_>,
        params: &[ParamId],
        inputs: &[NodeId],
        running: Option<(&Tensor, &Tensor)>,
    ) -> Result<NodeId> {
        self.validate()?;
        if inputs.len() != self.arity() || params.len() != self.param_shapes().len() {
            return Err(Error::Shape(format!("wrong number of inputs or parameters for {self:?}")));
        }
        let x = inputs[0];
        match *self {
            LayerSpec::Conv2d { geometry, .. } => graph.conv2d(x, params[0], params[1], geometry),
            LayerSpec::MaxPool2 => graph.maxpool2(x),
            LayerSpec::UpsampleNearest2 => graph.upsample2(x),
            LayerSpec::Dense { .. } => graph.dense(x, params[0], params[1]),
            LayerSpec::Embedding { .. } => {
                let indices = indices_of(graph.value(x))?;
                graph.embedding(params[0], &indices)
            }
            LayerSpec::BatchNorm { channels } => {
                let ones = Tensor::full(&[channels], 1.0);
                let zeros = Tensor::zeros(&[channels]);
                let (mean, var) = running.unwrap_or((&zeros, &ones));
                graph.batchnorm(x, params[0], params[1], mean, var, BATCHNORM_EPS)
            }
            LayerSpec::Dropout { p } => graph.dropout(x, p),
            LayerSpec::Relu => graph.relu(x),
            LayerSpec::Sigmoid => graph.sigmoid(x),
            LayerSpec::ConcatChannels => graph.concat_channels(x, inputs[1]),
        }
    }
}

fn indices_of(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Shape(format!("embedding index {v} is not a non-negative integer")))
            }
        })
        .collect()
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// A layer together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    /// Running mean and variance (batch-norm only).
    pub running: Option<(Tensor, Tensor)>,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!("{spec:?} takes {} parameter tensors", shapes.len())));
        }
        for ((_, s), p) in shapes.iter().zip(&params) {
            p.expect_shape(s)?;
        }
        let running = match spec {
            LayerSpec::BatchNorm { channels } => Some((Tensor::zeros(&[channels]), Tensor::full(&[channels], 1.0))),
            _ => None,
        };
        Ok(Self { spec, params, running })
    }

    pub fn init(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        let params = spec.init_params(rng)?;
        Self::new(spec, params)
    }

    /// Registers this layer's tensors under `prefix`.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<Vec<ParamId>> {
        self.spec
            .param_shapes()
            .iter()
            .zip(&self.params)
            .map(|((name, _), t)| store.add(format!("{prefix}.{name}"), t.clone()))
            .collect()
    }
}

/// Runs one layer on its inputs. Dropout draws from `rng` only in
/// [`Mode::Train`] and [`Mode::Mc`].
pub fn forward_layer(layer: &Layer, inputs: &[&Tensor], mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let ids = layer.register(&mut store, "layer")?;
    let mut graph = Graph::new(&store, mode, vec![rng.clone()]);
    let nodes = inputs
        .iter()
        .map(|t| graph.input((*t).clone()))
        .collect::<Result<Vec<_>>>()?;
    let running = layer.running.as_ref().map(|(m, v)| (m, v));
    let out = layer.spec.apply(&mut graph, &ids, &nodes, running)?;
    let value = graph.value(out).clone();
    // advance the caller's stream by exactly what the layer consumed
    if let Some(used) = graph_rng(graph) {
        *rng = used;
    }
    Ok(value)
}

fn graph_rng(graph: Graph<'_>) -> Option<Rng> {
    graph.into_rngs().into_iter().next()
}
