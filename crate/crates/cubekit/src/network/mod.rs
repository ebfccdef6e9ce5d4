//! Equivariance-preserving network scaffolding.
//!
//! Layers are chosen so that everything up to `GroupPool` commutes with the
//! group action and `GroupPool` turns equivariance into invariance:
//!
//! - conv biases are per-output-channel, shared across the group axis;
//! - batch-norm statistics are pooled over batch, group axis, and space
//!   (per channel), which makes them permutation-invariant;
//! - downsampling is 2³ average pooling, which commutes with
//!   signed-permutation rotations on even cubic grids;
//! - multiplicative weight noise is applied to the base filters before
//!   rotation, so all rotated copies share one noise draw.
//!
//! A `PlainConv` layer (group axis stays 1) exists so that a conventional
//! CNN baseline can be trained with the same machinery and budget.

mod checkpoint;
mod optim;

pub use checkpoint::{load_network, read_manifest, save_network, CheckpointError, CheckpointManifest};
pub use optim::{adam_step, train, AdamConfig, AdamState, NetworkOptimizer, TrainConfig, TrainReport};

use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gconv::{conv3d, conv3d_backward, gconv_backward, gconv_lift, gconv_hidden, ConvSpec, GconvKind};
use crate::scalar::Scalar;
use crate::symmetry::{FiniteRotationGroup, GroupKind};
use crate::voxel::{FeatureMap, FilterBank, MapShape, ShapeError};

/// One step of a [`LayerGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// First group convolution: raw map in, group-indexed map out.
    GConvLift { out_channels: usize, kernel: usize },
    /// Group convolution on a group-indexed map.
    GConvHidden { out_channels: usize, kernel: usize },
    /// Conventional convolution; the group axis stays at size 1.
    PlainConv { out_channels: usize, kernel: usize },
    Relu,
    BatchNorm,
    AvgPool2,
    GlobalSpatialPool,
    GroupPool,
    Dense { out_features: usize },
    /// Terminal marker; the trainer applies the loss after the last layer.
    SoftmaxCrossEntropy,
}

impl Layer {
    fn is_conv(&self) -> bool {
        matches!(
            self,
            Layer::GConvLift { .. } | Layer::GConvHidden { .. } | Layer::PlainConv { .. }
        )
    }
}

/// An ordered layer list plus the rotation group it is meant to run under.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerGraph {
    pub group: GroupKind,
    pub layers: Vec<Layer>,
}

/// Shape of the value flowing between layers during validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueShape {
    Map {
        channels: usize,
        group_size: usize,
        dims: [usize; 3],
    },
    Vector {
        len: usize,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has no layers")]
    Empty,
    #[error("layer {index} ({name}): {reason}")]
    Invalid {
        index: usize,
        name: String,
        reason: String,
    },
    #[error("the first convolution must be a lifting layer when group convolutions are used")]
    FirstConvNotLift,
    #[error("group pool must appear after the last convolution, at most once")]
    GroupPoolPlacement,
    #[error("graph must end in a logits vector")]
    NoLogits,
    #[error("unknown layer name {0:?}")]
    UnknownLayer(String),
    #[error("channel list has {got} entries, graph needs {expected}")]
    ChannelsCount { expected: usize, got: usize },
}

impl LayerGraph {
    /// Walk the shape chain for a given input, failing on the first layer
    /// whose operands cannot line up. Returns the shape after every layer.
    pub fn validate(&self, in_channels: usize, grid: [usize; 3]) -> Result<Vec<ValueShape>, GraphError> {
        if self.layers.is_empty() {
            return Err(GraphError::Empty);
        }
        let order = self.group.order();
        let uses_gconv = self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::GConvLift { .. } | Layer::GConvHidden { .. }));
        if uses_gconv {
            match self.layers.iter().find(|l| l.is_conv()) {
                Some(Layer::GConvLift { .. }) => {}
                _ => return Err(GraphError::FirstConvNotLift),
            }
        }
        let last_conv = self.layers.iter().rposition(Layer::is_conv);
        let group_pools: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::GroupPool))
            .map(|(i, _)| i)
            .collect();
        if group_pools.len() > 1 {
            return Err(GraphError::GroupPoolPlacement);
        }
        if let (Some(&gp), Some(lc)) = (group_pools.first(), last_conv) {
            if gp < lc {
                return Err(GraphError::GroupPoolPlacement);
            }
        }

        let mut shape = ValueShape::Map {
            channels: in_channels,
            group_size: 1,
            dims: grid,
        };
        let mut chain = Vec::with_capacity(self.layers.len());
        let fail = |index: usize, layer: &Layer, reason: String| GraphError::Invalid {
            index,
            name: format!("{layer:?}"),
            reason,
        };
        for (index, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (Layer::GConvLift { out_channels, kernel }, ValueShape::Map { group_size: 1, dims, .. }) => {
                    check_kernel(kernel).map_err(|e| fail(index, layer, e))?;
                    ValueShape::Map { channels: out_channels, group_size: order, dims }
                }
                (Layer::GConvHidden { out_channels, kernel }, ValueShape::Map { group_size, dims, .. })
                    if group_size == order =>
                {
                    check_kernel(kernel).map_err(|e| fail(index, layer, e))?;
                    ValueShape::Map { channels: out_channels, group_size: order, dims }
                }
                (Layer::PlainConv { out_channels, kernel }, ValueShape::Map { group_size: 1, dims, .. }) => {
                    check_kernel(kernel).map_err(|e| fail(index, layer, e))?;
                    ValueShape::Map { channels: out_channels, group_size: 1, dims }
                }
                (Layer::Relu, shape) => shape,
                (Layer::BatchNorm, shape @ ValueShape::Map { .. }) => shape,
                (Layer::AvgPool2, ValueShape::Map { channels, group_size, dims }) => {
                    if dims.iter().any(|d| d % 2 != 0) {
                        return Err(fail(index, layer, format!("odd spatial dims {dims:?}")));
                    }
                    ValueShape::Map { channels, group_size, dims: [dims[0] / 2, dims[1] / 2, dims[2] / 2] }
                }
                (Layer::GlobalSpatialPool, ValueShape::Map { channels, group_size, .. }) => {
                    ValueShape::Map { channels, group_size, dims: [1, 1, 1] }
                }
                (Layer::GroupPool, ValueShape::Map { channels, dims, .. }) => {
                    ValueShape::Map { channels, group_size: 1, dims }
                }
                (Layer::Dense { out_features }, ValueShape::Map { channels, group_size, dims: [1, 1, 1] }) => {
                    let _ = channels * group_size;
                    ValueShape::Vector { len: out_features }
                }
                (Layer::Dense { out_features }, ValueShape::Vector { .. }) => {
                    ValueShape::Vector { len: out_features }
                }
                (Layer::SoftmaxCrossEntropy, shape @ ValueShape::Vector { .. }) => {
                    if index + 1 != self.layers.len() {
                        return Err(fail(index, layer, "loss must be the last layer".into()));
                    }
                    shape
                }
                (l, s) => {
                    return Err(fail(index, &l, format!("cannot apply to {s:?}")));
                }
            };
            chain.push(shape);
        }
        match chain.last() {
            Some(ValueShape::Vector { .. }) => Ok(chain),
            _ => Err(GraphError::NoLogits),
        }
    }
}

fn check_kernel(kernel: usize) -> Result<(), String> {
    if kernel % 2 == 0 {
        return Err(format!("kernel {kernel} must be odd"));
    }
    Ok(())
}

/// Build a graph from the config-file vocabulary: layer names, conv/dense
/// widths in order of appearance, one kernel size for every convolution, and
/// the class count for the final dense layer.
pub fn build_graph(
    group: GroupKind,
    layer_names: &[String],
    channels: &[usize],
    kernel: usize,
    n_classes: usize,
) -> Result<LayerGraph, GraphError> {
    let dense_total = layer_names.iter().filter(|n| n.as_str() == "dense").count();
    let mut width = channels.iter().copied();
    let mut dense_seen = 0;
    let mut layers = Vec::with_capacity(layer_names.len());
    let mut needed = 0;
    for name in layer_names {
        let layer = match name.as_str() {
            "lift" => {
                needed += 1;
                Layer::GConvLift {
                    out_channels: width.next().unwrap_or(0),
                    kernel,
                }
            }
            "hidden" => {
                needed += 1;
                Layer::GConvHidden {
                    out_channels: width.next().unwrap_or(0),
                    kernel,
                }
            }
            "conv" => {
                needed += 1;
                Layer::PlainConv {
                    out_channels: width.next().unwrap_or(0),
                    kernel,
                }
            }
            "relu" => Layer::Relu,
            "batch_norm" => Layer::BatchNorm,
            "avg_pool2" => Layer::AvgPool2,
            "global_pool" => Layer::GlobalSpatialPool,
            "group_pool" => Layer::GroupPool,
            "dense" => {
                dense_seen += 1;
                if dense_seen == dense_total {
                    Layer::Dense { out_features: n_classes }
                } else {
                    needed += 1;
                    Layer::Dense {
                        out_features: width.next().unwrap_or(0),
                    }
                }
            }
            "softmax_xent" => Layer::SoftmaxCrossEntropy,
            other => return Err(GraphError::UnknownLayer(other.to_string())),
        };
        layers.push(layer);
    }
    if needed != channels.len() {
        return Err(GraphError::ChannelsCount {
            expected: needed,
            got: channels.len(),
        });
    }
    Ok(LayerGraph { group, layers })
}

/// Learnable parameters (and batch-norm state) attached to one layer.
#[derive(Clone, Debug)]
pub enum LayerParams<T> {
    Conv { filters: FilterBank<T>, bias: Vec<T> },
    BatchNorm {
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
    Dense {
        weight: Vec<T>,
        bias: Vec<T>,
        in_features: usize,
        out_features: usize,
    },
    None,
}

/// Per-layer gradients, shaped exactly like the trainable parameters.
#[derive(Clone, Debug)]
pub enum LayerGrads<T> {
    Conv { filters: FilterBank<T>, bias: Vec<T> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
    Dense { weight: Vec<T>, bias: Vec<T> },
    None,
}

/// A validated graph with allocated parameters, ready to run.
#[derive(Clone, Debug)]
pub struct Network<T> {
    graph: LayerGraph,
    group: FiniteRotationGroup,
    params: Vec<LayerParams<T>>,
    in_channels: usize,
    grid: [usize; 3],
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A batch member's value between layers.
#[derive(Clone, Debug)]
pub enum Act<T> {
    Map(FeatureMap<T>),
    Vector(Vec<T>),
}

impl<T: Scalar> Act<T> {
    fn map(&self) -> &FeatureMap<T> {
        match self {
            Act::Map(m) => m,
            Act::Vector(_) => panic!("expected map activation"),
        }
    }

    fn vector(&self) -> &[T] {
        match self {
            Act::Vector(v) => v,
            Act::Map(_) => panic!("expected vector activation"),
        }
    }
}

enum Aux<T> {
    None,
    Conv {
        effective: FilterBank<T>,
        mask: Option<Vec<T>>,
    },
    BatchNorm {
        xhat: Vec<FeatureMap<T>>,
        inv_std: Vec<T>,
    },
}

/// Everything the backward pass needs: per-layer input batches plus
/// layer-local intermediates.
pub struct Trace<T> {
    inputs: Vec<Vec<Act<T>>>,
    aux: Vec<Aux<T>>,
    logits: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &[Vec<T>] {
        &self.logits
    }
}

const BN_EPSILON: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> Network<T> {
    /// Validate the graph against the input signature and draw He-initialized
    /// parameters from `seed`.
    pub fn init(
        graph: LayerGraph,
        in_channels: usize,
        grid: [usize; 3],
        seed: u64,
    ) -> Result<Self, GraphError> {
        let chain = graph.validate(in_channels, grid)?;
        let group = FiniteRotationGroup::generate(graph.group);
        let order = group.order();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(graph.layers.len());
        let mut prev = ValueShape::Map {
            channels: in_channels,
            group_size: 1,
            dims: grid,
        };
        for (layer, after) in graph.layers.iter().zip(&chain) {
            let p = match (*layer, prev) {
                (Layer::GConvLift { out_channels, kernel }, ValueShape::Map { channels, .. }) => {
                    let mut filters = FilterBank::zeros(out_channels, channels, 1, kernel).unwrap();
                    he_init_with(&mut filters, &mut rng);
                    LayerParams::Conv { filters, bias: vec![T::ZERO; out_channels] }
                }
                (Layer::GConvHidden { out_channels, kernel }, ValueShape::Map { channels, .. }) => {
                    let mut filters = FilterBank::zeros(out_channels, channels, order, kernel).unwrap();
                    he_init_with(&mut filters, &mut rng);
                    LayerParams::Conv { filters, bias: vec![T::ZERO; out_channels] }
                }
                (Layer::PlainConv { out_channels, kernel }, ValueShape::Map { channels, .. }) => {
                    let mut filters = FilterBank::zeros(out_channels, channels, 1, kernel).unwrap();
                    he_init_with(&mut filters, &mut rng);
                    LayerParams::Conv { filters, bias: vec![T::ZERO; out_channels] }
                }
                (Layer::BatchNorm, ValueShape::Map { channels, .. }) => LayerParams::BatchNorm {
                    gamma: vec![T::ONE; channels],
                    beta: vec![T::ZERO; channels],
                    running_mean: vec![T::ZERO; channels],
                    running_var: vec![T::ONE; channels],
                },
                (Layer::Dense { out_features }, before) => {
                    let in_features = match before {
                        ValueShape::Map { channels, group_size, .. } => channels * group_size,
                        ValueShape::Vector { len } => len,
                    };
                    let std = (2.0 / in_features as f64).sqrt();
                    let normal = Normal::new(0.0, std).unwrap();
                    let weight = (0..out_features * in_features)
                        .map(|_| T::from_f64(normal.sample(&mut rng)))
                        .collect();
                    LayerParams::Dense {
                        weight,
                        bias: vec![T::ZERO; out_features],
                        in_features,
                        out_features,
                    }
                }
                _ => LayerParams::None,
            };
            params.push(p);
            prev = *after;
        }
        Ok(Network {
            graph,
            group,
            params,
            in_channels,
            grid,
            seed,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn group(&self) -> &FiniteRotationGroup {
        &self.group
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    /// Number of learnable scalars (batch-norm running stats excluded).
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Conv { filters, bias } => filters.data().len() + bias.len(),
                LayerParams::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
                LayerParams::Dense { weight, bias, .. } => weight.len() + bias.len(),
                LayerParams::None => 0,
            })
            .sum()
    }

    /// Trainable tensors in a fixed traversal order shared with
    /// [`grads_flat`], so an optimizer can walk both in lockstep.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for p in &mut self.params {
            match p {
                LayerParams::Conv { filters, bias } => {
                    out.push(filters.data_mut());
                    out.push(bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerParams::Dense { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Training forward pass: batch statistics for batch-norm (running stats
    /// updated in place) and optional multiplicative filter noise drawn from
    /// `noise` = (std, step seed).
    pub fn forward_train(&mut self, batch: &[FeatureMap<T>], noise: Option<(f64, u64)>) -> Trace<T> {
        self.forward_full(batch, Mode::Train, noise)
    }

    /// Inference forward pass for one sample; uses running statistics.
    pub fn logits(&self, input: &FeatureMap<T>) -> Vec<T> {
        let mut net = self.clone_headless();
        let trace = net.forward_full(std::slice::from_ref(input), Mode::Eval, None);
        trace.logits.into_iter().next().unwrap()
    }

    /// Inference forward for a batch.
    pub fn logits_batch(&self, batch: &[FeatureMap<T>]) -> Vec<Vec<T>> {
        let mut net = self.clone_headless();
        net.forward_full(batch, Mode::Eval, None).logits
    }

    // Eval mode never mutates state; the clone only satisfies the unified
    // forward path's signature and shares no expensive buffers.
    fn clone_headless(&self) -> Network<T> {
        self.clone()
    }

    fn forward_full(&mut self, batch: &[FeatureMap<T>], mode: Mode, noise: Option<(f64, u64)>) -> Trace<T> {
        assert!(!batch.is_empty(), "batch must be nonempty");
        let mut acts: Vec<Act<T>> = batch.iter().map(|m| Act::Map(m.clone())).collect();
        let mut inputs = Vec::with_capacity(self.graph.layers.len());
        let mut aux = Vec::with_capacity(self.graph.layers.len());
        let layers = self.graph.layers.clone();
        for (index, layer) in layers.iter().enumerate() {
            inputs.push(acts.clone());
            let (next, a) = self.apply_layer(index, layer, acts, mode, noise);
            acts = next;
            aux.push(a);
        }
        let logits = acts
            .into_iter()
            .map(|a| match a {
                Act::Vector(v) => v,
                Act::Map(_) => panic!("graph did not end in logits"),
            })
            .collect();
        Trace { inputs, aux, logits }
    }

    fn apply_layer(
        &mut self,
        index: usize,
        layer: &Layer,
        acts: Vec<Act<T>>,
        mode: Mode,
        noise: Option<(f64, u64)>,
    ) -> (Vec<Act<T>>, Aux<T>) {
        let spec = ConvSpec::same();
        match layer {
            Layer::GConvLift { .. } | Layer::GConvHidden { .. } | Layer::PlainConv { .. } => {
                let LayerParams::Conv { filters, bias } = &self.params[index] else {
                    unreachable!()
                };
                let (effective, mask) = match (mode, noise) {
                    (Mode::Train, Some((std, step_seed))) if std > 0.0 => {
                        let masked = weight_noise(filters, std, step_seed ^ (index as u64) << 32);
                        (masked.0, Some(masked.1))
                    }
                    _ => (filters.clone(), None),
                };
                let group = &self.group;
                let out: Vec<Act<T>> = acts
                    .par_iter()
                    .map(|a| {
                        let m = a.map();
                        let mut out = match layer {
                            Layer::GConvLift { .. } => gconv_lift(m, &effective, group, &spec).unwrap(),
                            Layer::GConvHidden { .. } => gconv_hidden(m, &effective, group, &spec).unwrap(),
                            Layer::PlainConv { .. } => conv3d(m, &effective, &spec).unwrap(),
                            _ => unreachable!(),
                        };
                        add_channel_bias(&mut out, bias);
                        Act::Map(out)
                    })
                    .collect();
                (out, Aux::Conv { effective, mask })
            }
            Layer::Relu => {
                let out = acts
                    .into_iter()
                    .map(|a| match a {
                        Act::Map(m) => Act::Map(relu(&m)),
                        Act::Vector(v) => {
                            Act::Vector(v.into_iter().map(|x| x.max(T::ZERO)).collect())
                        }
                    })
                    .collect();
                (out, Aux::None)
            }
            Layer::BatchNorm => {
                let LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } = &mut self.params[index]
                else {
                    unreachable!()
                };
                let maps: Vec<&FeatureMap<T>> = acts.iter().map(|a| a.map()).collect();
                let (out, xhat, inv_std) =
                    batch_norm_forward(&maps, gamma, beta, running_mean, running_var, mode);
                (
                    out.into_iter().map(Act::Map).collect(),
                    Aux::BatchNorm { xhat, inv_std },
                )
            }
            Layer::AvgPool2 => {
                let out = acts
                    .into_iter()
                    .map(|a| Act::Map(avg_pool2(a.map()).unwrap()))
                    .collect();
                (out, Aux::None)
            }
            Layer::GlobalSpatialPool => {
                let out = acts
                    .into_iter()
                    .map(|a| Act::Map(global_spatial_pool(a.map())))
                    .collect();
                (out, Aux::None)
            }
            Layer::GroupPool => {
                let out = acts
                    .into_iter()
                    .map(|a| Act::Map(group_pool(a.map())))
                    .collect();
                (out, Aux::None)
            }
            Layer::Dense { .. } => {
                let LayerParams::Dense { weight, bias, in_features, .. } = &self.params[index] else {
                    unreachable!()
                };
                let out = acts
                    .into_iter()
                    .map(|a| {
                        let x: Vec<T> = match a {
                            Act::Map(m) => m.into_data(),
                            Act::Vector(v) => v,
                        };
                        assert_eq!(x.len(), *in_features);
                        Act::Vector(dense(&x, weight, bias))
                    })
                    .collect();
                (out, Aux::None)
            }
            Layer::SoftmaxCrossEntropy => (acts, Aux::None),
        }
    }

    /// Reverse pass from per-sample logit gradients; returns parameter
    /// gradients aligned with the layer list.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[Vec<T>]) -> Vec<LayerGrads<T>> {
        let batch = dlogits.len();
        let mut upstream: Vec<Act<T>> = dlogits.iter().map(|v| Act::Vector(v.clone())).collect();
        let mut grads: Vec<LayerGrads<T>> = self.graph.layers.iter().map(|_| LayerGrads::None).collect();
        let spec = ConvSpec::same();
        for index in (0..self.graph.layers.len()).rev() {
            let layer = &self.graph.layers[index];
            let inputs = &trace.inputs[index];
            match layer {
                Layer::GConvLift { .. } | Layer::GConvHidden { .. } | Layer::PlainConv { .. } => {
                    let Aux::Conv { effective, mask } = &trace.aux[index] else {
                        unreachable!()
                    };
                    let group = &self.group;
                    let kind = match layer {
                        Layer::GConvLift { .. } => Some(GconvKind::Lift),
                        Layer::GConvHidden { .. } => Some(GconvKind::Hidden),
                        _ => None,
                    };
                    let per_sample: Vec<(FeatureMap<T>, FilterBank<T>, Vec<T>)> = (0..batch)
                        .into_par_iter()
                        .map(|s| {
                            let up = upstream[s].map();
                            let bias_grad = channel_bias_grad(up);
                            let input = inputs[s].map();
                            let (gi, gf) = match kind {
                                Some(k) => gconv_backward(k, input, effective, up, group, &spec).unwrap(),
                                None => conv3d_backward(input, effective, up, &spec).unwrap(),
                            };
                            (gi, gf, bias_grad)
                        })
                        .collect();
                    let mut filters = FilterBank::zeros(
                        effective.out_channels(),
                        effective.in_channels(),
                        effective.group_size(),
                        effective.kernel(),
                    )
                    .unwrap();
                    let mut bias = vec![T::ZERO; effective.out_channels()];
                    let mut next_upstream = Vec::with_capacity(batch);
                    for (gi, gf, bg) in per_sample {
                        accumulate(filters.data_mut(), gf.data());
                        accumulate(&mut bias, &bg);
                        next_upstream.push(Act::Map(gi));
                    }
                    if let Some(mask) = mask {
                        for (g, m) in filters.data_mut().iter_mut().zip(mask) {
                            *g *= *m;
                        }
                    }
                    grads[index] = LayerGrads::Conv { filters, bias };
                    upstream = next_upstream;
                }
                Layer::Relu => {
                    upstream = upstream
                        .into_iter()
                        .zip(inputs)
                        .map(|(u, x)| match (u, x) {
                            (Act::Map(mut u), Act::Map(x)) => {
                                for (g, &v) in u.data_mut().iter_mut().zip(x.data()) {
                                    if v <= T::ZERO {
                                        *g = T::ZERO;
                                    }
                                }
                                Act::Map(u)
                            }
                            (Act::Vector(mut u), Act::Vector(x)) => {
                                for (g, &v) in u.iter_mut().zip(x) {
                                    if v <= T::ZERO {
                                        *g = T::ZERO;
                                    }
                                }
                                Act::Vector(u)
                            }
                            _ => unreachable!(),
                        })
                        .collect();
                }
                Layer::BatchNorm => {
                    let Aux::BatchNorm { xhat, inv_std } = &trace.aux[index] else {
                        unreachable!()
                    };
                    let LayerParams::BatchNorm { gamma, .. } = &self.params[index] else {
                        unreachable!()
                    };
                    let ups: Vec<&FeatureMap<T>> = upstream.iter().map(|u| u.map()).collect();
                    let (dx, dgamma, dbeta) = batch_norm_backward(&ups, xhat, inv_std, gamma);
                    grads[index] = LayerGrads::BatchNorm { gamma: dgamma, beta: dbeta };
                    upstream = dx.into_iter().map(Act::Map).collect();
                }
                Layer::AvgPool2 => {
                    upstream = upstream
                        .into_iter()
                        .zip(inputs)
                        .map(|(u, x)| Act::Map(avg_pool2_backward(u.map(), x.map().shape())))
                        .collect();
                }
                Layer::GlobalSpatialPool => {
                    upstream = upstream
                        .into_iter()
                        .zip(inputs)
                        .map(|(u, x)| Act::Map(global_spatial_pool_backward(u.map(), x.map().shape())))
                        .collect();
                }
                Layer::GroupPool => {
                    upstream = upstream
                        .into_iter()
                        .zip(inputs)
                        .map(|(u, x)| Act::Map(group_pool_backward(u.map(), x.map().shape())))
                        .collect();
                }
                Layer::Dense { .. } => {
                    let LayerParams::Dense { weight, in_features, out_features, .. } =
                        &self.params[index]
                    else {
                        unreachable!()
                    };
                    let mut dw = vec![T::ZERO; weight.len()];
                    let mut db = vec![T::ZERO; *out_features];
                    let mut next_upstream = Vec::with_capacity(batch);
                    for (u, x) in upstream.iter().zip(inputs) {
                        let u = u.vector();
                        let x_vec: Vec<T> = match x {
                            Act::Map(m) => m.data().to_vec(),
                            Act::Vector(v) => v.clone(),
                        };
                        let mut dx = vec![T::ZERO; *in_features];
                        for o in 0..*out_features {
                            db[o] += u[o];
                            let row = &weight[o * in_features..(o + 1) * in_features];
                            let drow = &mut dw[o * in_features..(o + 1) * in_features];
                            for i in 0..*in_features {
                                drow[i] += u[o] * x_vec[i];
                                dx[i] += u[o] * row[i];
                            }
                        }
                        // Reshape the gradient back to the incoming activation kind.
                        next_upstream.push(match x {
                            Act::Map(m) => Act::Map(FeatureMap::from_vec(m.shape(), dx).unwrap()),
                            Act::Vector(_) => Act::Vector(dx),
                        });
                    }
                    grads[index] = LayerGrads::Dense { weight: dw, bias: db };
                    upstream = next_upstream;
                }
                Layer::SoftmaxCrossEntropy => {}
            }
        }
        grads
    }
}

/// Gradient tensors in the same traversal order as
/// [`Network::trainable_mut`].
pub fn grads_flat<T: Scalar>(grads: &[LayerGrads<T>]) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Conv { filters, bias } => {
                out.push(filters.data());
                out.push(bias);
            }
            LayerGrads::BatchNorm { gamma, beta } => {
                out.push(gamma);
                out.push(beta);
            }
            LayerGrads::Dense { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            LayerGrads::None => {}
        }
    }
    out
}

fn accumulate<T: Scalar>(acc: &mut [T], inc: &[T]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += *b;
    }
}

fn add_channel_bias<T: Scalar>(map: &mut FeatureMap<T>, bias: &[T]) {
    let shape = map.shape();
    for c in 0..shape.channels {
        let b = bias[c];
        for g in 0..shape.group_size {
            for v in map.spatial_slice_mut(c, g) {
                *v += b;
            }
        }
    }
}

fn channel_bias_grad<T: Scalar>(upstream: &FeatureMap<T>) -> Vec<T> {
    let shape = upstream.shape();
    (0..shape.channels)
        .map(|c| {
            let mut acc = T::ZERO;
            for g in 0..shape.group_size {
                for &v in upstream.spatial_slice(c, g) {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(map: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap::from_vec(
        map.shape(),
        map.data().iter().map(|&x| x.max(T::ZERO)).collect(),
    )
    .unwrap()
}

/// Non-overlapping 2³ mean pooling; the group axis is untouched.
pub fn avg_pool2<T: Scalar>(map: &FeatureMap<T>) -> Result<FeatureMap<T>, ShapeError> {
    let s = map.shape();
    let dims = s.spatial();
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(ShapeError::OddSpatialDim(dims));
    }
    let out_dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut out = FeatureMap::zeros(MapShape::new(s.channels, s.group_size, out_dims[0], out_dims[1], out_dims[2]));
    let eighth = T::from_f64(0.125);
    for c in 0..s.channels {
        for g in 0..s.group_size {
            let src = map.spatial_slice(c, g);
            let dst = out.spatial_slice_mut(c, g);
            for d in 0..out_dims[0] {
                for h in 0..out_dims[1] {
                    for w in 0..out_dims[2] {
                        let mut acc = T::ZERO;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += src[((2 * d + dz) * dims[1] + 2 * h + dy) * dims[2] + 2 * w + dx];
                                }
                            }
                        }
                        dst[(d * out_dims[1] + h) * out_dims[2] + w] = acc * eighth;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn avg_pool2_backward<T: Scalar>(upstream: &FeatureMap<T>, in_shape: MapShape) -> FeatureMap<T> {
    let out_dims = upstream.shape().spatial();
    let dims = in_shape.spatial();
    let mut grad = FeatureMap::zeros(in_shape);
    let eighth = T::from_f64(0.125);
    for c in 0..in_shape.channels {
        for g in 0..in_shape.group_size {
            let up = upstream.spatial_slice(c, g);
            let dst = grad.spatial_slice_mut(c, g);
            for d in 0..out_dims[0] {
                for h in 0..out_dims[1] {
                    for w in 0..out_dims[2] {
                        let u = up[(d * out_dims[1] + h) * out_dims[2] + w] * eighth;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    dst[((2 * d + dz) * dims[1] + 2 * h + dy) * dims[2] + 2 * w + dx] += u;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Average over all spatial positions, leaving a per-(channel, group-slot)
/// signature as a `[C][Gax][1][1][1]` map.
pub fn global_spatial_pool<T: Scalar>(map: &FeatureMap<T>) -> FeatureMap<T> {
    let s = map.shape();
    let norm = T::from_f64(1.0 / s.spatial_len() as f64);
    let mut out = FeatureMap::zeros(MapShape::new(s.channels, s.group_size, 1, 1, 1));
    for c in 0..s.channels {
        for g in 0..s.group_size {
            let mut acc = T::ZERO;
            for &v in map.spatial_slice(c, g) {
                acc += v;
            }
            out.spatial_slice_mut(c, g)[0] = acc * norm;
        }
    }
    out
}

fn global_spatial_pool_backward<T: Scalar>(upstream: &FeatureMap<T>, in_shape: MapShape) -> FeatureMap<T> {
    let norm = T::from_f64(1.0 / in_shape.spatial_len() as f64);
    let mut grad = FeatureMap::zeros(in_shape);
    for c in 0..in_shape.channels {
        for g in 0..in_shape.group_size {
            let u = upstream.spatial_slice(c, g)[0] * norm;
            for v in grad.spatial_slice_mut(c, g) {
                *v = u;
            }
        }
    }
    grad
}

/// Average over the group axis, yielding a rotation-invariant descriptor.
pub fn group_pool<T: Scalar>(map: &FeatureMap<T>) -> FeatureMap<T> {
    let s = map.shape();
    let norm = T::from_f64(1.0 / s.group_size as f64);
    let mut out = FeatureMap::zeros(MapShape::new(s.channels, 1, s.depth, s.height, s.width));
    for c in 0..s.channels {
        let dst = out.spatial_slice_mut(c, 0);
        for g in 0..s.group_size {
            let src = map.spatial_slice(c, g);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        for d in dst {
            *d *= norm;
        }
    }
    out
}

fn group_pool_backward<T: Scalar>(upstream: &FeatureMap<T>, in_shape: MapShape) -> FeatureMap<T> {
    let norm = T::from_f64(1.0 / in_shape.group_size as f64);
    let mut grad = FeatureMap::zeros(in_shape);
    for c in 0..in_shape.channels {
        let up: Vec<T> = upstream.spatial_slice(c, 0).iter().map(|&u| u * norm).collect();
        for g in 0..in_shape.group_size {
            grad.spatial_slice_mut(c, g).copy_from_slice(&up);
        }
    }
    grad
}

/// Affine map `y = Wx + b` with `W` stored row-major `[out][in]`.
pub fn dense<T: Scalar>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let out_features = bias.len();
    let in_features = x.len();
    assert_eq!(weight.len(), out_features * in_features);
    (0..out_features)
        .map(|o| {
            let row = &weight[o * in_features..(o + 1) * in_features];
            let mut acc = bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            acc
        })
        .collect()
}

/// Multi-class cross-entropy with log-sum-exp stabilization.
/// Returns the loss and its gradient w.r.t. the logits (softmax − one-hot).
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    assert!(label < logits.len(), "label {label} out of range");
    let max = logits.iter().copied().fold(logits[0], T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            if i == label {
                p - T::ONE
            } else {
                p
            }
        })
        .collect();
    (loss, grad)
}

/// Softmax probabilities (used by rotation-averaged prediction).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(logits[0], T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-channel batch normalization with statistics pooled over batch, group
/// axis, and all spatial axes. `state` running statistics are updated in
/// train mode and consulted in eval mode.
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }
}

/// Standalone batch-norm operation over a batch of maps.
pub fn batch_norm<T: Scalar>(
    batch: &[&FeatureMap<T>],
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Vec<FeatureMap<T>> {
    let BatchNormState { gamma, beta, running_mean, running_var } = state;
    batch_norm_forward(batch, gamma, beta, running_mean, running_var, mode).0
}

fn batch_norm_forward<T: Scalar>(
    batch: &[&FeatureMap<T>],
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
) -> (Vec<FeatureMap<T>>, Vec<FeatureMap<T>>, Vec<T>) {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let shape = batch[0].shape();
    let channels = shape.channels;
    let per_channel = shape.group_size * shape.spatial_len();
    let count = T::from_f64((batch.len() * per_channel) as f64);
    let eps = T::from_f64(BN_EPSILON);

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::ZERO; channels];
            let mut var = vec![T::ZERO; channels];
            for c in 0..channels {
                let mut acc = T::ZERO;
                for m in batch {
                    for g in 0..shape.group_size {
                        for &v in m.spatial_slice(c, g) {
                            acc += v;
                        }
                    }
                }
                mean[c] = acc / count;
                let mut sq = T::ZERO;
                for m in batch {
                    for g in 0..shape.group_size {
                        for &v in m.spatial_slice(c, g) {
                            let d = v - mean[c];
                            sq += d * d;
                        }
                    }
                }
                var[c] = sq / count;
            }
            let momentum = T::from_f64(BN_MOMENTUM);
            for c in 0..channels {
                running_mean[c] = running_mean[c] * (T::ONE - momentum) + mean[c] * momentum;
                running_var[c] = running_var[c] * (T::ONE - momentum) + var[c] * momentum;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(batch.len());
    let mut xhat_all = Vec::with_capacity(batch.len());
    for m in batch {
        let mut xhat = FeatureMap::zeros(shape);
        let mut y = FeatureMap::zeros(shape);
        for c in 0..channels {
            for g in 0..shape.group_size {
                let src = m.spatial_slice(c, g);
                let xh = xhat.spatial_slice_mut(c, g);
                for (o, &v) in xh.iter_mut().zip(src) {
                    *o = (v - mean[c]) * inv_std[c];
                }
            }
            for g in 0..shape.group_size {
                let xh = xhat.spatial_slice(c, g).to_vec();
                let dst = y.spatial_slice_mut(c, g);
                for (o, v) in dst.iter_mut().zip(xh) {
                    *o = gamma[c] * v + beta[c];
                }
            }
        }
        out.push(y);
        xhat_all.push(xhat);
    }
    (out, xhat_all, inv_std)
}

fn batch_norm_backward<T: Scalar>(
    upstream: &[&FeatureMap<T>],
    xhat: &[FeatureMap<T>],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<FeatureMap<T>>, Vec<T>, Vec<T>) {
    let shape = xhat[0].shape();
    let channels = shape.channels;
    let per_channel = shape.group_size * shape.spatial_len();
    let count = T::from_f64((upstream.len() * per_channel) as f64);

    let mut dgamma = vec![T::ZERO; channels];
    let mut dbeta = vec![T::ZERO; channels];
    for c in 0..channels {
        for (u, xh) in upstream.iter().zip(xhat) {
            for g in 0..shape.group_size {
                for (&du, &x) in u.spatial_slice(c, g).iter().zip(xh.spatial_slice(c, g)) {
                    dgamma[c] += du * x;
                    dbeta[c] += du;
                }
            }
        }
    }

    // dx = inv_std · γ · (du − mean(du) − x̂ · mean(du·x̂))
    let mut dx = Vec::with_capacity(upstream.len());
    for (u, xh) in upstream.iter().zip(xhat) {
        let mut grad = FeatureMap::zeros(shape);
        for c in 0..channels {
            let mean_du = dbeta[c] / count;
            let mean_duxh = dgamma[c] / count;
            let scale = gamma[c] * inv_std[c];
            for g in 0..shape.group_size {
                let us = u.spatial_slice(c, g);
                let xs = xh.spatial_slice(c, g);
                let gs = grad.spatial_slice_mut(c, g);
                for i in 0..us.len() {
                    gs[i] = scale * (us[i] - mean_du - xs[i] * mean_duxh);
                }
            }
        }
        dx.push(grad);
    }
    (dx, dgamma, dbeta)
}

/// He initialization: zero-mean Gaussian with variance `2 / fan_in` where
/// `fan_in = I·Gax·k³`.
pub fn he_init<T: Scalar>(bank: &mut FilterBank<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    he_init_with(bank, &mut rng);
}

fn he_init_with<T: Scalar>(bank: &mut FilterBank<T>, rng: &mut impl Rng) {
    let fan_in = bank.in_channels() * bank.group_size() * bank.kernel_len();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    for v in bank.data_mut() {
        *v = T::from_f64(normal.sample(rng));
    }
}

/// Multiplicative Gaussian weight noise: every base filter entry is scaled by
/// `1 + ε`, `ε ~ N(0, std²)`. Applied before filter rotation so all rotated
/// copies share the same draw. Returns the noised bank and the mask.
pub fn weight_noise<T: Scalar>(bank: &FilterBank<T>, std: f64, seed: u64) -> (FilterBank<T>, Vec<T>) {
    if std == 0.0 {
        return (bank.clone(), vec![T::ONE; bank.data().len()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let mask: Vec<T> = (0..bank.data().len())
        .map(|_| T::from_f64(1.0 + normal.sample(&mut rng)))
        .collect();
    let mut noised = bank.clone();
    for (v, m) in noised.data_mut().iter_mut().zip(&mask) {
        *v *= *m;
    }
    (noised, mask)
}

/// Average the softmax outputs over every group-rotated copy of `map` and
/// return the argmax class; ties break toward the lowest class index.
pub fn predict_rotation_averaged<T: Scalar>(
    net: &Network<T>,
    map: &FeatureMap<T>,
    group: &FiniteRotationGroup,
) -> usize {
    let mut mean: Vec<f64> = Vec::new();
    for p in 0..group.order() {
        let rotated = crate::voxel::apply_group_action(map, group, p).unwrap();
        let probs = softmax(&net.logits(&rotated));
        if mean.is_empty() {
            mean = probs.iter().map(|p| p.to_f64()).collect();
        } else {
            for (m, p) in mean.iter_mut().zip(&probs) {
                *m += p.to_f64();
            }
        }
    }
    argmax(&mean)
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
