//! Decom-Net and Enhance-Net.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::Conv2dGeometry;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A convolution's kernel and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub geom: Conv2dGeometry,
}

impl ConvLayer {
    /// Square `size×size` kernel with "same" padding for odd sizes.
    /// Kernels are He-uniform, biases uniform in `±1/√fan_in`.
    fn init(c_in: usize, c_out: usize, size: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * size * size) as f64;
        let k_bound = (6.0 / fan_in).sqrt();
        let b_bound = 1.0 / fan_in.sqrt();
        Self {
            kernel: rng.uniform_tensor(&[c_out, c_in, size, size], -k_bound, k_bound),
            bias: rng.uniform_tensor(&[c_out], -b_bound, b_bound),
            geom: Conv2dGeometry {
                stride,
                padding: size / 2,
            },
        }
    }

    fn apply(&self, g: &mut Graph, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        g.conv2d(x, kernel, Some(bias), self.geom)
    }
}

/// Ordered, named convolution layers; parameter order is `[k0, b0, k1, b1, …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    layers: Vec<(String, ConvLayer)>,
}

impl ConvStack {
    fn new(layers: Vec<(String, ConvLayer)>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, i: usize) -> &ConvLayer {
        &self.layers[i].1
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(_, l)| [l.kernel.clone(), l.bias.clone()])
            .collect()
    }

    /// `true` for bias entries of [`Self::param_tensors`].
    pub fn bias_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|_| [false, true]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(_, l)| l.kernel.numel() + l.bias.numel())
            .sum()
    }

    pub fn with_params(&self, params: &[Tensor]) -> Result<Self> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        let mut out = self.clone();
        for ((_, layer), pair) in out.layers.iter_mut().zip(params.chunks(2)) {
            if pair[0].shape() != layer.kernel.shape() || pair[1].shape() != layer.bias.shape() {
                return Err(Error::shape("parameter shapes differ from the architecture"));
            }
            layer.kernel = pair[0].clone();
            layer.bias = pair[1].clone();
        }
        Ok(out)
    }

    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for (_, l) in &mut out.layers {
            l.kernel = Tensor::zeros(l.kernel.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
        out
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{prefix}{name}.kernel"), l.kernel.clone()),
                    (format!("{prefix}{name}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    /// Replaces every parameter with the same-named tensor from `tensors`.
    fn load_named(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let params = self
            .named_tensors(prefix)
            .into_iter()
            .map(|(name, _)| {
                tensors
                    .get(&name)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_params(&params)
    }

    fn conv(&self, g: &mut Graph, i: usize, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        self.layers[i].1.apply(g, x, params[2 * i], params[2 * i + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecomConfig {
    pub channels: usize,
    pub hidden_layers: usize,
    pub kernel_size: usize,
}

impl Default for DecomConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            hidden_layers: 5,
            kernel_size: 3,
        }
    }
}

impl DecomConfig {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "decomposition net needs positive width and odd kernel, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Feature conv, `hidden_layers` conv+ReLU layers, and a 4-channel output
/// conv whose sigmoid yields reflectance (3 channels) and illumination (1).
#[derive(Debug, Clone, PartialEq)]
pub struct DecomNet {
    pub config: DecomConfig,
    pub stack: ConvStack,
}

impl DecomNet {
    pub fn init(config: DecomConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel_size);
        let mut layers = vec![("feature".to_string(), ConvLayer::init(3, c, k, 1, rng))];
        for i in 0..config.hidden_layers {
            layers.push((format!("hidden.{i}"), ConvLayer::init(c, c, k, 1, rng)));
        }
        layers.push(("output".to_string(), ConvLayer::init(c, 4, k, 1, rng)));
        Ok(Self {
            config,
            stack: ConvStack::new(layers),
        })
    }

    pub fn zeros(config: DecomConfig) -> Result<Self> {
        let net = Self::init(config, &mut Rng::new(0))?;
        Ok(Self {
            stack: net.stack.zeroed(),
            ..net
        })
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.stack.param_tensors()
    }

    pub fn with_params(&self, params: &[Tensor]) -> Result<Self> {
        Ok(Self {
            config: self.config,
            stack: self.stack.with_params(params)?,
        })
    }

    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.param_tensors().into_iter().map(|t| g.leaf(t)).collect()
    }

    /// Returns `(R, I)` nodes for an RGB input node.
    pub fn forward_node(
        &self,
        g: &mut Graph,
        image: NodeId,
        params: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        let n = self.stack.len();
        let mut x = self.stack.conv(g, 0, image, params)?;
        for i in 1..n - 1 {
            let y = self.stack.conv(g, i, x, params)?;
            x = g.relu(y)?;
        }
        let out = self.stack.conv(g, n - 1, x, params)?;
        let out = g.sigmoid(out)?;
        let r = g.slice_channels(out, 0, 3)?;
        let i = g.slice_channels(out, 3, 1)?;
        Ok((r, i))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.stack.named_tensors("decom.")
    }

    pub fn from_named(config: DecomConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::zeros(config)?;
        Ok(Self {
            config,
            stack: template.stack.load_named(tensors, "decom.")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnhanceConfig {
    /// Number of down/up-sampling blocks, `M`.
    pub scales: usize,
    /// Feature channels per block, `C`.
    pub channels: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            channels: 16,
        }
    }
}

impl EnhanceConfig {
    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.scales
    }

    fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.channels == 0 || self.scales > 16 {
            return Err(Error::invalid(format!(
                "enhancement net needs 1..=16 scales and positive width, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Rejects spatial sizes the encoder cannot halve `scales` times.
    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h.is_multiple_of(d) && w.is_multiple_of(d) {
            return Ok(());
        }
        let pad = |n: usize| (d - n % d) % d;
        Err(Error::shape(format!(
            "spatial size {h}×{w} must be divisible by {d} for {} scales; \
             pad height by {} and width by {}",
            self.scales,
            pad(h),
            pad(w)
        )))
    }
}

/// Encoder–decoder that maps `[R; I]` to an adjusted illumination map.
///
/// Layers, in parameter order: a 3×3 input conv (4→C), `M` stride-2
/// downsampling convs, `M` stride-1 upsampling convs, the 1×1 fusion conv
/// over the `C·M` concatenated decoder outputs, and the 3×3 output conv.
/// Each upsampling block adds the encoder feature of matching resolution
/// before its ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceNet {
    pub config: EnhanceConfig,
    pub stack: ConvStack,
}

impl EnhanceNet {
    pub fn init(config: EnhanceConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (m, c) = (config.scales, config.channels);
        let mut layers = vec![("input".to_string(), ConvLayer::init(4, c, 3, 1, rng))];
        for i in 0..m {
            layers.push((format!("down.{i}"), ConvLayer::init(c, c, 3, 2, rng)));
        }
        for i in 0..m {
            layers.push((format!("up.{i}"), ConvLayer::init(c, c, 3, 1, rng)));
        }
        layers.push(("fusion".to_string(), ConvLayer::init(c * m, c, 1, 1, rng)));
        layers.push(("output".to_string(), ConvLayer::init(c, 1, 3, 1, rng)));
        Ok(Self {
            config,
            stack: ConvStack::new(layers),
        })
    }

    pub fn zeros(config: EnhanceConfig) -> Result<Self> {
        let net = Self::init(config, &mut Rng::new(0))?;
        Ok(Self {
            stack: net.stack.zeroed(),
            ..net
        })
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.stack.param_tensors()
    }

    pub fn with_params(&self, params: &[Tensor]) -> Result<Self> {
        Ok(Self {
            config: self.config,
            stack: self.stack.with_params(params)?,
        })
    }

    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.param_tensors().into_iter().map(|t| g.leaf(t)).collect()
    }

    /// Adjusted illumination `Î` (`1×H×W`, in `[0,1]`).
    pub fn forward_node(
        &self,
        g: &mut Graph,
        reflectance: NodeId,
        illumination: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let (_, h, w) = g.value(illumination).dims3()?;
        self.config.check_dims(h, w)?;
        let m = self.config.scales;
        let x = g.concat_channels(&[reflectance, illumination])?;

        let mut encoder = vec![self.stack.conv(g, 0, x, params)?];
        for i in 0..m {
            let y = self.stack.conv(g, 1 + i, encoder[i], params)?;
            encoder.push(g.relu(y)?);
        }

        let mut decoder = Vec::with_capacity(m);
        let mut d = encoder[m];
        for j in 0..m {
            let up = g.upsample(d, 2)?;
            let y = self.stack.conv(g, 1 + m + j, up, params)?;
            let y = g.add(y, encoder[m - 1 - j])?;
            d = g.relu(y)?;
            decoder.push(d);
        }

        let mut full_res = Vec::with_capacity(m);
        for (j, &dj) in decoder.iter().enumerate() {
            let factor = 1 << (m - 1 - j);
            full_res.push(if factor == 1 { dj } else { g.upsample(dj, factor)? });
        }
        let stacked = g.concat_channels(&full_res)?;
        let fused = self.stack.conv(g, 1 + 2 * m, stacked, params)?;
        let out = self.stack.conv(g, 2 + 2 * m, fused, params)?;
        g.sigmoid(out)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.stack.named_tensors("enhance.")
    }

    pub fn from_named(config: EnhanceConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::zeros(config)?;
        Ok(Self {
            config,
            stack: template.stack.load_named(tensors, "enhance.")?,
        })
    }
}
