//! Convolutional Block Attention Module.
//!
//! Channel attention gates each channel by
//! `σ(MLP(avgpool F) + MLP(maxpool F))` with a shared two-layer MLP
//! `W1·relu(W0·d)`. Spatial attention gates each pixel by
//! `σ(conv7×7([avg_c F; max_c F]))`. The block applies channel attention
//! first and spatial attention to the result.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::{Conv2dGeometry, PoolMode};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;
const SPATIAL_PADDING: usize = SPATIAL_KERNEL / 2;

/// Shared MLP weights: `w0` is `(C/r)×C`, `w1` is `C×(C/r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    w0: Tensor,
    w1: Tensor,
    reduction: usize,
}

impl ChannelAttentionParams {
    pub fn new(w0: Tensor, w1: Tensor) -> Result<Self> {
        let (hidden, c) = match w0.shape()[..] {
            [a, b] => (a, b),
            _ => return Err(Error::shape(format!("w0 must be 2-D, got {:?}", w0.shape()))),
        };
        if w1.shape() != [c, hidden] {
            return Err(Error::shape(format!(
                "w1 must be {c}×{hidden} to match w0 {hidden}×{c}, got {:?}",
                w1.shape()
            )));
        }
        if c % hidden != 0 {
            return Err(Error::invalid(format!(
                "hidden width {hidden} does not divide {c} channels"
            )));
        }
        Ok(Self {
            w0,
            w1,
            reduction: c / hidden,
        })
    }

    fn check_ratio(channels: usize, reduction: usize) -> Result<usize> {
        if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(format!(
                "reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        Ok(channels / reduction)
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::check_ratio(channels, reduction)?;
        Ok(Self {
            w0: Tensor::zeros(&[hidden, channels]),
            w1: Tensor::zeros(&[channels, hidden]),
            reduction,
        })
    }

    /// Uniform in `±1/√fan_in` per layer.
    pub fn init(channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = Self::check_ratio(channels, reduction)?;
        let b0 = 1.0 / (channels as f64).sqrt();
        let b1 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w0: rng.uniform_tensor(&[hidden, channels], -b0, b0),
            w1: rng.uniform_tensor(&[channels, hidden], -b1, b1),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }
}

/// 7×7 convolution over the two channel-pooled maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams {
    kernel: Tensor,
    bias: f64,
}

impl SpatialAttentionParams {
    pub fn new(kernel: Tensor, bias: f64) -> Result<Self> {
        if kernel.shape() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
            return Err(Error::shape(format!(
                "spatial attention kernel must be 1×2×7×7, got {:?}",
                kernel.shape()
            )));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros() -> Self {
        Self {
            kernel: Tensor::zeros(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
            bias: 0.0,
        }
    }

    pub fn init(rng: &mut Rng) -> Self {
        let bound = 1.0 / ((2 * SPATIAL_KERNEL * SPATIAL_KERNEL) as f64).sqrt();
        Self {
            kernel: rng.uniform_tensor(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], -bound, bound),
            bias: rng.uniform_range(-bound, bound),
        }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }
}

/// Parameter leaves of one CBAM block on a graph.
#[derive(Debug, Clone, Copy)]
pub struct CbamNodes {
    pub w0: NodeId,
    pub w1: NodeId,
    pub kernel: NodeId,
    pub bias: NodeId,
}

impl CbamNodes {
    pub fn from_slice(ids: &[NodeId]) -> Self {
        Self {
            w0: ids[0],
            w1: ids[1],
            kernel: ids[2],
            bias: ids[3],
        }
    }
}

/// Shared MLP applied to a `C×1×1` descriptor.
fn shared_mlp(g: &mut Graph, d: NodeId, w0: NodeId, w1: NodeId) -> Result<NodeId> {
    let (hidden, c) = match g.value(w0).shape()[..] {
        [a, b] => (a, b),
        _ => return Err(Error::shape("w0 must be 2-D")),
    };
    let k0 = g.reshape(w0, &[hidden, c, 1, 1])?;
    let k1 = g.reshape(w1, &[c, hidden, 1, 1])?;
    let h = g.conv2d(d, k0, None, Conv2dGeometry::default())?;
    let h = g.relu(h)?;
    g.conv2d(h, k1, None, Conv2dGeometry::default())
}

/// Channel attention map `M_c`, `C×1×1`.
pub fn channel_attention_node(
    g: &mut Graph,
    f: NodeId,
    w0: NodeId,
    w1: NodeId,
) -> Result<NodeId> {
    let avg = g.global_pool(f, PoolMode::Avg)?;
    let max = g.global_pool(f, PoolMode::Max)?;
    let a = shared_mlp(g, avg, w0, w1)?;
    let m = shared_mlp(g, max, w0, w1)?;
    let s = g.add(a, m)?;
    g.sigmoid(s)
}

/// Spatial attention map `M_s`, `1×H×W`.
pub fn spatial_attention_node(
    g: &mut Graph,
    f: NodeId,
    kernel: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let avg = g.channel_pool(f, PoolMode::Avg)?;
    let max = g.channel_pool(f, PoolMode::Max)?;
    let stacked = g.concat_channels(&[avg, max])?;
    let geom = Conv2dGeometry {
        stride: 1,
        padding: SPATIAL_PADDING,
    };
    let s = g.conv2d(stacked, kernel, Some(bias), geom)?;
    g.sigmoid(s)
}

/// Intermediate values of one CBAM pass.
#[derive(Debug, Clone, Copy)]
pub struct CbamTrace {
    pub channel_map: NodeId,
    pub refined: NodeId,
    pub spatial_map: NodeId,
    pub output: NodeId,
}

pub fn cbam_node(g: &mut Graph, f: NodeId, p: CbamNodes) -> Result<CbamTrace> {
    let channel_map = channel_attention_node(g, f, p.w0, p.w1)?;
    let refined = g.mul(f, channel_map)?;
    let spatial_map = spatial_attention_node(g, refined, p.kernel, p.bias)?;
    let output = g.mul(refined, spatial_map)?;
    Ok(CbamTrace {
        channel_map,
        refined,
        spatial_map,
        output,
    })
}

/// A CBAM block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Cbam {
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
}

impl Cbam {
    pub fn init(channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttentionParams::init(channels, reduction, rng)?,
            spatial: SpatialAttentionParams::init(rng),
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttentionParams::zeros(channels, reduction)?,
            spatial: SpatialAttentionParams::zeros(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channel.channels()
    }

    /// `[w0, w1, kernel, bias]`, the order [`CbamNodes::from_slice`] expects.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        vec![
            self.channel.w0.clone(),
            self.channel.w1.clone(),
            self.spatial.kernel.clone(),
            Tensor::scalar(self.spatial.bias),
        ]
    }

    pub fn register(&self, g: &mut Graph) -> CbamNodes {
        let ids: Vec<NodeId> = self.param_tensors().into_iter().map(|t| g.leaf(t)).collect();
        CbamNodes::from_slice(&ids)
    }

    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        cbam_apply(f, &self.channel, &self.spatial)
    }

    /// Tensors under the `cbam.*` container names.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}w0"), self.channel.w0.clone()),
            (format!("{prefix}w1"), self.channel.w1.clone()),
            (format!("{prefix}spatial.kernel"), self.spatial.kernel.clone()),
            (format!("{prefix}spatial.bias"), Tensor::scalar(self.spatial.bias)),
        ]
    }

    pub fn from_named(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .get(&format!("{prefix}{name}"))
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing tensor {prefix}{name}")))
        };
        let bias = get("spatial.bias")?;
        if !bias.is_scalar() {
            return Err(Error::shape("spatial bias must hold one value"));
        }
        Ok(Self {
            channel: ChannelAttentionParams::new(get("w0")?, get("w1")?)?,
            spatial: SpatialAttentionParams::new(get("spatial.kernel")?, bias.item())?,
        })
    }
}

pub fn channel_attention(f: &Tensor, params: &ChannelAttentionParams) -> Result<Tensor> {
    let (c, _, _) = f.dims3()?;
    if c != params.channels() {
        return Err(Error::shape(format!(
            "channel attention built for {} channels applied to {c}",
            params.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(f.clone());
    let w0 = g.leaf(params.w0.clone());
    let w1 = g.leaf(params.w1.clone());
    let m = channel_attention_node(&mut g, x, w0, w1)?;
    Ok(g.value(m).clone())
}

pub fn spatial_attention(f: &Tensor, params: &SpatialAttentionParams) -> Result<Tensor> {
    f.dims3()?;
    let mut g = Graph::new();
    let x = g.leaf(f.clone());
    let k = g.leaf(params.kernel.clone());
    let b = g.leaf(Tensor::scalar(params.bias));
    let m = spatial_attention_node(&mut g, x, k, b)?;
    Ok(g.value(m).clone())
}

/// Channel then spatial refinement; output has the shape of `f`.
pub fn cbam_apply(
    f: &Tensor,
    channel: &ChannelAttentionParams,
    spatial: &SpatialAttentionParams,
) -> Result<Tensor> {
    let (c, _, _) = f.dims3()?;
    if c != channel.channels() {
        return Err(Error::shape(format!(
            "CBAM built for {} channels applied to {c}",
            channel.channels()
        )));
    }
    let block = Cbam {
        channel: channel.clone(),
        spatial: spatial.clone(),
    };
    let mut g = Graph::new();
    let x = g.leaf(f.clone());
    let nodes = block.register(&mut g);
    let trace = cbam_node(&mut g, x, nodes)?;
    Ok(g.value(trace.output).clone())
}

/// One layer of a small sequential convolutional network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        kernel: Tensor,
        bias: Tensor,
        geom: Conv2dGeometry,
    },
    Relu,
    Cbam(Cbam),
}

/// A sequential stack of convolutions, activations and CBAM blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub in_channels: usize,
    pub layers: Vec<Layer>,
}

impl ToyNet {
    pub fn new(in_channels: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            in_channels,
            layers,
        };
        net.channels_at(net.layers.len())?;
        Ok(net)
    }

    /// Conv(3×3, pad 1) + ReLU blocks with the given channel widths.
    pub fn conv_stack(in_channels: usize, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for &c_out in widths {
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            layers.push(Layer::Conv {
                kernel: rng.uniform_tensor(&[c_out, c_in, 3, 3], -bound, bound),
                bias: rng.uniform_tensor(&[c_out], -bound, bound),
                geom: Conv2dGeometry {
                    stride: 1,
                    padding: 1,
                },
            });
            layers.push(Layer::Relu);
            c_in = c_out;
        }
        Self::new(in_channels, layers)
    }

    /// Channel count of the activation entering layer `position`.
    pub fn channels_at(&self, position: usize) -> Result<usize> {
        if position > self.layers.len() {
            return Err(Error::invalid(format!(
                "position {position} out of range for a {}-layer network",
                self.layers.len()
            )));
        }
        let mut c = self.in_channels;
        for layer in &self.layers[..position] {
            match layer {
                Layer::Conv { kernel, .. } => {
                    if kernel.shape()[1] != c {
                        return Err(Error::shape(format!(
                            "conv expects {} channels but receives {c}",
                            kernel.shape()[1]
                        )));
                    }
                    c = kernel.shape()[0];
                }
                Layer::Relu => {}
                Layer::Cbam(block) => {
                    if block.channels() != c {
                        return Err(Error::shape(format!(
                            "CBAM expects {} channels but receives {c}",
                            block.channels()
                        )));
                    }
                }
            }
        }
        Ok(c)
    }

    /// Returns a copy with `block` spliced in before layer `position`.
    pub fn insert_cbam(&self, position: usize, block: Cbam) -> Result<Self> {
        let c = self.channels_at(position)?;
        if block.channels() != c {
            return Err(Error::shape(format!(
                "CBAM for {} channels inserted where the network carries {c}",
                block.channels()
            )));
        }
        let mut out = self.clone();
        out.layers.insert(position, Layer::Cbam(block));
        Ok(out)
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { kernel, bias, .. } => {
                    out.push(kernel.clone());
                    out.push(bias.clone());
                }
                Layer::Relu => {}
                Layer::Cbam(block) => out.extend(block.param_tensors()),
            }
        }
        out
    }

    /// Forward pass using the parameter leaves in [`Self::param_tensors`] order.
    pub fn forward_node(&self, g: &mut Graph, input: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let mut x = input;
        let mut next = 0;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { geom, .. } => {
                    let y = g.conv2d(x, params[next], Some(params[next + 1]), *geom)?;
                    next += 2;
                    y
                }
                Layer::Relu => g.relu(x)?,
                Layer::Cbam(_) => {
                    let nodes = CbamNodes::from_slice(&params[next..next + 4]);
                    next += 4;
                    cbam_node(g, x, nodes)?.output
                }
            };
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let params: Vec<NodeId> = self.param_tensors().into_iter().map(|t| g.leaf(t)).collect();
        let y = self.forward_node(&mut g, x, &params)?;
        Ok(g.value(y).clone())
    }
}
