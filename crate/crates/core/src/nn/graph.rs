//! Tape-based reverse-mode differentiation over a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeometry};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Execution mode for stochastic and statistics-dependent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Dropout active, batch-norm uses batch statistics.
    Train,
    /// Dropout is the identity, batch-norm uses running statistics.
    Eval,
    /// Monte-Carlo sampling: dropout active, batch-norm uses running statistics.
    Mc,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::Mc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub type NodeId = usize;

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.check_finite(&name)?;
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// Gradients produced by [`Graph::backward`]: one slot per parameter (same
/// shape, zero when unused) plus gradients of graph inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    inputs: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Parameter gradients without any input gradients.
    pub fn from_params(params: Vec<Tensor>) -> Self {
        Self {
            params,
            inputs: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    /// Gradient with respect to an input node, if it was reachable.
    pub fn input(&self, node: NodeId) -> Option<&Tensor> {
        self.inputs.get(&node)
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Conv2d { x: NodeId, w: ParamId, b: ParamId, geom: ConvGeometry },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Upsample2 { x: NodeId },
    Dense { x: NodeId, w: ParamId, b: ParamId },
    Embedding { table: ParamId, indices: Vec<usize> },
    BatchNorm { gamma: ParamId, beta: ParamId, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool, x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Concat { a: NodeId, b: NodeId, split: usize },
    Tile { x: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a batch-norm node in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// A single forward pass. Nodes are appended in topological order; the graph
/// can be differentiated once.
pub struct Graph<'p> {
    params: &'p ParamStore,
    mode: Mode,
    rngs: Vec<Rng>,
    nodes: Vec<Node>,
    moments: HashMap<NodeId, BatchMoments>,
    differentiated: bool,
}

impl<'p> Graph<'p> {
    /// `rngs` holds either one stream shared by the whole batch or one stream
    /// per batch item.
    pub fn new(params: &'p ParamStore, mode: Mode, rngs: Vec<Rng>) -> Self {
        Self {
            params,
            mode,
            rngs,
            nodes: Vec::new(),
            moments: HashMap::new(),
            differentiated: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Consumes the graph, returning its random streams in their advanced state.
    pub fn into_rngs(self) -> Vec<Rng> {
        self.rngs
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Statistics seen by a batch-norm node during a train-mode pass.
    pub fn batch_moments(&self, node: NodeId) -> Option<&BatchMoments> {
        self.moments.get(&node)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<NodeId> {
        self.touch()?;
        value.check_finite(what)?;
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    fn touch(&self) -> Result<()> {
        if self.differentiated {
            Err(Error::StaleGraph("graph was already differentiated"))
        } else {
            Ok(())
        }
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: ParamId, geom: ConvGeometry) -> Result<NodeId> {
        let y = kernels::conv2d(self.value(x), self.params.get(w), self.params.get(b), geom)?;
        self.push(y, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = kernels::maxpool2(self.value(x))?;
        self.push(y, Op::MaxPool2 { x, argmax }, "maxpool2")
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::upsample_nearest2(self.value(x))?;
        self.push(y, Op::Upsample2 { x }, "upsample_nearest2")
    }

    pub fn dense(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let y = kernels::dense(self.value(x), self.params.get(w), self.params.get(b))?;
        self.push(y, Op::Dense { x, w, b }, "dense")
    }

    pub fn embedding(&mut self, table: ParamId, indices: &[usize]) -> Result<NodeId> {
        let y = kernels::embedding(self.params.get(table), indices)?;
        self.push(y, Op::Embedding { table, indices: indices.to_vec() }, "embedding")
    }

    /// Batch-norm over the channel axis. In train mode the batch statistics are
    /// used (and recorded, see [`Graph::batch_moments`]) unless only one value
    /// per channel is available, in which case the running statistics apply.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let input = self.value(x);
        let (n, _, s) = kernels::channel_layout(input)?;
        let batch_stats = self.mode == Mode::Train && n * s > 1;
        let (mean, var) = if batch_stats {
            kernels::channel_moments(input)?
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let (y, xhat, inv_std) =
            kernels::batchnorm_apply(input, self.params.get(gamma), self.params.get(beta), &mean, &var, eps)?;
        let node = self.push(y, Op::BatchNorm { gamma, beta, xhat, inv_std, batch_stats, x }, "batchnorm")?;
        if batch_stats {
            self.moments.insert(node, BatchMoments { mean, var, count: n * s });
        }
        Ok(node)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let shape = self.value(x).shape().to_vec();
        let mask = if self.mode.dropout_active() {
            kernels::dropout_mask(&shape, p, &mut self.rngs)?
        } else {
            vec![1.0; shape.iter().product()]
        };
        let input = self.value(x);
        let data = input.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let y = Tensor::new(input.shape().to_vec(), data)?;
        self.push(y, Op::Dropout { x, mask }, "dropout")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x }, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid { x }, "sigmoid")
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).shape()[1];
        self.push(y, Op::Concat { a, b, split }, "concat_channels")
    }

    /// Broadcasts a `[N, C]` node over an `h x w` grid.
    pub fn tile(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let y = kernels::tile_spatial(self.value(x), h, w)?;
        self.push(y, Op::Tile { x }, "tile")
    }

    /// Back-propagates `output_grad` from `output`. May be called once per
    /// forward pass.
    pub fn backward(&mut self, output: NodeId, output_grad: Tensor) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::StaleGraph("backward called twice without a new forward pass"));
        }
        if output >= self.nodes.len() {
            return Err(Error::Shape(format!("node {output} does not exist")));
        }
        output_grad.expect_shape(self.value(output).shape())?;
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(output_grad);
        let mut pgrads = self.params.zeros_like();
        let mut inputs = HashMap::new();

        fn acc(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
            match slot {
                Some(t) => t.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    inputs.insert(id, dy);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.params.get(*w), &dy, *geom)?;
                    pgrads[w.0].add_assign(&dw)?;
                    pgrads[b.0].add_assign(&db)?;
                    acc(&mut grads[*x], dx)?;
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = kernels::maxpool2_backward(self.value(*x).shape(), argmax, &dy)?;
                    acc(&mut grads[*x], dx)?;
                }
                Op::Upsample2 { x } => {
                    acc(&mut grads[*x], kernels::upsample_nearest2_backward(&dy)?)?;
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = kernels::dense_backward(self.value(*x), self.params.get(*w), &dy)?;
                    pgrads[w.0].add_assign(&dw)?;
                    pgrads[b.0].add_assign(&db)?;
                    acc(&mut grads[*x], dx)?;
                }
                Op::Embedding { table, indices } => {
                    let dt = kernels::embedding_backward(self.params.get(*table).shape(), indices, &dy)?;
                    pgrads[table.0].add_assign(&dt)?;
                }
                Op::BatchNorm { gamma, beta, xhat, inv_std, batch_stats, x } => {
                    let (dx, dgamma, dbeta) =
                        kernels::batchnorm_backward(xhat, self.params.get(*gamma), inv_std, &dy, *batch_stats)?;
                    pgrads[gamma.0].add_assign(&dgamma)?;
                    pgrads[beta.0].add_assign(&dbeta)?;
                    acc(&mut grads[*x], dx)?;
                }
                Op::Dropout { x, mask } => {
                    let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(&mut grads[*x], Tensor::new(dy.shape().to_vec(), data)?)?;
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let data = dy.data().iter().zip(xv.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads[*x], Tensor::new(dy.shape().to_vec(), data)?)?;
                }
                Op::Sigmoid { x } => {
                    let data = dy.data().iter().zip(node.value.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    acc(&mut grads[*x], Tensor::new(dy.shape().to_vec(), data)?)?;
                }
                Op::Concat { a, b, split } => {
                    let (da, db) = kernels::concat_channels_backward(&dy, *split)?;
                    acc(&mut grads[*a], da)?;
                    acc(&mut grads[*b], db)?;
                }
                Op::Tile { x } => {
                    acc(&mut grads[*x], kernels::tile_spatial_backward(&dy)?)?;
                }
            }
        }
        for (i, g) in pgrads.iter().enumerate() {
            g.check_finite(&format!("gradient of {}", self.params.names()[i]))?;
        }
        Ok(Gradients { params: pgrads, inputs })
    }
}
