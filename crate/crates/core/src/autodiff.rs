//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records each primitive as it is applied, caching its forward
//! value. [`Graph::backward`] walks the tape once in reverse and returns a
//! gradient for every node.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Conv2dGeometry, Direction, PoolMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: Conv2dGeometry,
    },
    Activation(NodeId, Activation),
    Exp(NodeId),
    Abs(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    GlobalPool(NodeId, PoolMode),
    ChannelPool(NodeId, PoolMode),
    Concat(Vec<NodeId>),
    SliceChannels { input: NodeId, start: usize },
    Upsample(NodeId, usize),
    Difference(NodeId, Direction),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation. Node ids are only meaningful for the graph that
/// issued them.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Output of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when `id` does not
    /// influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn is_reachable(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

/// Shape of an equal-rank broadcast, where each dim pair is equal or one of them is 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "broadcast needs equal rank, got {a:?} and {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Flat source offsets into `src` for every element of `out`, with broadcast dims pinned at 0.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let numel: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    for _ in 0..numel {
        offsets.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out[d] {
                break;
            }
            index[d] = 0;
        }
    }
    offsets
}

fn sign_class(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// First arg-max per channel (`global`) or per pixel across channels.
fn max_branches(t: &Tensor, global: bool) -> Vec<usize> {
    let Ok((c, h, w)) = t.dims3() else {
        return Vec::new();
    };
    let d = t.data();
    if global {
        d.chunks(h * w).map(|p| ops::first_argmax(p.iter().copied())).collect()
    } else {
        (0..h * w)
            .map(|p| ops::first_argmax((0..c).map(|k| d[k * h * w + p])))
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
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

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: Conv2dGeometry,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            out,
        )
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId> {
        let out = ops::activation(self.value(input), kind);
        self.push(Op::Activation(input, kind), out)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.activation(input, Activation::Relu)
    }

    pub fn exp(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.value(input).map(f64::exp);
        self.push(Op::Exp(input), out)
    }

    /// Elementwise |x|; the derivative at exactly zero is taken as zero.
    pub fn abs(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.value(input).map(f64::abs);
        self.push(Op::Abs(input), out)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: Binary) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            va.zip_with(vb, |x, y| apply_binary(kind, x, y))?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape())?;
            let oa = broadcast_offsets(va.shape(), &shape);
            let ob = broadcast_offsets(vb.shape(), &shape);
            let data = oa
                .iter()
                .zip(&ob)
                .map(|(&i, &j)| apply_binary(kind, va.data()[i], vb.data()[j]))
                .collect();
            Tensor::new(shape, data)?
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
        };
        self.push(op, out)
    }

    /// `a + b` with equal-rank broadcasting over size-1 dims.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Sub)
    }

    /// Hadamard product with equal-rank broadcasting over size-1 dims.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, input: NodeId, k: f64) -> Result<NodeId> {
        let out = self.value(input).scale(k);
        self.push(Op::Scale(input, k), out)
    }

    pub fn global_pool(&mut self, input: NodeId, mode: PoolMode) -> Result<NodeId> {
        let out = ops::global_pool(self.value(input), mode)?;
        self.push(Op::GlobalPool(input, mode), out)
    }

    pub fn channel_pool(&mut self, input: NodeId, mode: PoolMode) -> Result<NodeId> {
        let out = ops::channelwise_pool(self.value(input), mode)?;
        self.push(Op::ChannelPool(input, mode), out)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values)?;
        self.push(Op::Concat(parts.to_vec()), out)
    }

    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = self.value(input).slice_channels(start, len)?;
        self.push(Op::SliceChannels { input, start }, out)
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let out = ops::nearest_upsample(self.value(input), factor)?;
        self.push(Op::Upsample(input, factor), out)
    }

    pub fn difference(&mut self, input: NodeId, dir: Direction) -> Result<NodeId> {
        let out = ops::forward_difference(self.value(input), dir)?;
        self.push(Op::Difference(input, dir), out)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).reshape(shape)?;
        self.push(Op::Reshape(input), out)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(Op::Sum(input), out)
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(input).mean());
        self.push(Op::Mean(input), out)
    }

    /// Mean absolute value, the normalized L1 norm.
    pub fn mean_abs(&mut self, input: NodeId) -> Result<NodeId> {
        let a = self.abs(input)?;
        self.mean(a)
    }

    /// True when every ReLU, `|·|` and max-pool node of `other` selects the
    /// same branch as in `self` (input sign or first arg-max per output).
    /// Both graphs must come from the same construction.
    pub fn same_branches(&self, other: &Graph) -> bool {
        if self.nodes.len() != other.nodes.len() {
            return false;
        }
        self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
            let inputs = |id: &NodeId| (self.value(*id), other.value(*id));
            match &a.op {
                Op::Activation(x, Activation::Relu) | Op::Abs(x) => {
                    let (u, v) = inputs(x);
                    u.data().iter().zip(v.data()).all(|(p, q)| sign_class(*p) == sign_class(*q))
                }
                Op::GlobalPool(x, PoolMode::Max) | Op::ChannelPool(x, PoolMode::Max) => {
                    let global = matches!(a.op, Op::GlobalPool(..));
                    let (u, v) = inputs(x);
                    matches!(b.op, Op::GlobalPool(..) | Op::ChannelPool(..))
                        && max_branches(u, global) == max_branches(v, global)
                }
                _ => true,
            }
        })
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (target, contribution) in self.local_grads(node, &g)? {
                accumulate(&mut grads[target.0], contribution)?;
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| self.value(id);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk, gb) = ops::conv2d_backward(v(*input), v(*kernel), g, *geom)?;
                let mut out = vec![(*input, gx), (*kernel, gk)];
                if let Some(b) = bias {
                    out.push((*b, gb.reshape(v(*b).shape())?));
                }
                out
            }
            Op::Activation(input, kind) => vec![(
                *input,
                ops::activation_backward(v(*input), &node.value, *kind, g)?,
            )],
            Op::Exp(input) => vec![(*input, node.value.zip_with(g, |y, g| y * g)?)],
            Op::Abs(input) => vec![(*input, v(*input).zip_with(g, |x, g| sign(x) * g)?)],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, v(*a).shape(), |g, _| g)?),
                (*b, reduce_to(g, v(*b).shape(), |g, _| g)?),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, v(*a).shape(), |g, _| g)?),
                (*b, reduce_to(g, v(*b).shape(), |g, _| -g)?),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a), v(*b));
                let shape = g.shape();
                let oa = broadcast_offsets(va.shape(), shape);
                let ob = broadcast_offsets(vb.shape(), shape);
                let mut ga = vec![0.0; va.numel()];
                let mut gb = vec![0.0; vb.numel()];
                for (k, &gv) in g.data().iter().enumerate() {
                    ga[oa[k]] += gv * vb.data()[ob[k]];
                    gb[ob[k]] += gv * va.data()[oa[k]];
                }
                vec![
                    (*a, Tensor::new(va.shape().to_vec(), ga)?),
                    (*b, Tensor::new(vb.shape().to_vec(), gb)?),
                ]
            }
            Op::Scale(input, k) => vec![(*input, g.scale(*k))],
            Op::GlobalPool(input, mode) => {
                vec![(*input, ops::global_pool_backward(v(*input), *mode, g)?)]
            }
            Op::ChannelPool(input, mode) => vec![(
                *input,
                ops::channelwise_pool_backward(v(*input), *mode, g)?,
            )],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = v(p).shape()[0];
                    out.push((p, g.slice_channels(start, c)?));
                    start += c;
                }
                out
            }
            Op::SliceChannels { input, start } => {
                let (c, h, w) = v(*input).dims3()?;
                let plane = h * w;
                let mut data = vec![0.0; c * plane];
                data[start * plane..start * plane + g.numel()].copy_from_slice(g.data());
                vec![(*input, Tensor::new(vec![c, h, w], data)?)]
            }
            Op::Upsample(input, factor) => {
                vec![(*input, ops::nearest_upsample_backward(g, *factor)?)]
            }
            Op::Difference(input, dir) => {
                vec![(*input, ops::forward_difference_backward(g, *dir)?)]
            }
            Op::Reshape(input) => vec![(*input, g.reshape(v(*input).shape())?)],
            Op::Sum(input) => vec![(*input, Tensor::full(v(*input).shape(), g.item()))],
            Op::Mean(input) => {
                let n = v(*input).numel() as f64;
                vec![(*input, Tensor::full(v(*input).shape(), g.item() / n))]
            }
        })
    }
}

fn apply_binary(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sums a broadcast gradient back down to `shape`, mapping each element through `f`.
fn reduce_to(g: &Tensor, shape: &[usize], f: impl Fn(f64, usize) -> f64) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(Tensor::from_fn(shape, |i| f(g.data()[i], i)));
    }
    let offsets = broadcast_offsets(shape, g.shape());
    let mut out = vec![0.0; shape.iter().product()];
    for (k, &gv) in g.data().iter().enumerate() {
        out[offsets[k]] += f(gv, offsets[k]);
    }
    Tensor::new(shape.to_vec(), out)
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.zip_with(&contribution, |a, b| a + b)?;
        }
        None => *slot = Some(contribution),
    }
    Ok(())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Activation(_, Activation::Sigmoid) => "sigmoid",
        Op::Activation(_, Activation::Relu) => "relu",
        Op::Exp(_) => "exp",
        Op::Abs(_) => "abs",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::GlobalPool(..) => "global_pool",
        Op::ChannelPool(..) => "channel_pool",
        Op::Concat(_) => "concat",
        Op::SliceChannels { .. } => "slice_channels",
        Op::Upsample(..) => "upsample",
        Op::Difference(..) => "difference",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}
