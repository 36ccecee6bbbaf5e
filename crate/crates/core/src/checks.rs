//! Finite-difference gradient suites over the library's differentiable parts.
//!
//! Each case builds a scalar loss from seeded parameters on 8×8 inputs and
//! runs [`finite_diff_check`] over every parameter coordinate.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, NodeId};
use crate::cbam::{cbam_node, channel_attention_node, spatial_attention_node, Cbam, CbamNodes, ToyNet, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, CheckOptions, CheckReport, PASS_THRESHOLD};
use crate::ops::{Conv2dGeometry, Direction, PoolMode};
use crate::retinex::{
    decom_loss_node, enhance_loss_node, DecomConfig, DecomNet, EnhanceConfig, EnhanceNet, LossCoefficients, LOW,
    NORMAL,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

const SIDE: usize = 8;

/// Fixture seed used when none is given.
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Primitives,
    Cbam,
    Retinex,
    All,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Primitives => "primitives",
            Target::Cbam => "cbam",
            Target::Retinex => "retinex",
            Target::All => "all",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Target::Primitives),
            "cbam" => Ok(Target::Cbam),
            "retinex" => Ok(Target::Retinex),
            "all" => Ok(Target::All),
            other => Err(Error::invalid(format!(
                "unknown gradient-check target {other:?} (expected primitives, cbam, retinex or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub epsilon: f64,
    pub seed: u64,
    /// Name of a case whose analytic gradient is deliberately skewed.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            epsilon: crate::gradcheck::DEFAULT_EPSILON,
            seed: DEFAULT_SEED,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: CheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed(PASS_THRESHOLD)
    }
}

type LossFn<'a> = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync + 'a>;

struct Case<'a> {
    name: &'static str,
    params: Vec<Tensor>,
    loss: LossFn<'a>,
}

/// `Σ y ∘ w` for a fixed random weighting `w`, so every output element
/// contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = g.leaf(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn primitive_cases(rng: &mut Rng) -> Vec<Case<'static>> {
    let x = rng.uniform_tensor(&[3, SIDE, SIDE], -1.0, 1.0);
    let k = rng.uniform_tensor(&[2, 3, 3, 3], -0.5, 0.5);
    let b = rng.uniform_tensor(&[2], -0.5, 0.5);
    let chan = rng.uniform_tensor(&[3, 1, 1], -1.0, 1.0);
    let w_full = rng.uniform_tensor(&[3, SIDE, SIDE], -1.0, 1.0);
    let w_conv1 = rng.uniform_tensor(&[2, SIDE, SIDE], -1.0, 1.0);
    let w_conv2 = rng.uniform_tensor(&[2, SIDE / 2, SIDE / 2], -1.0, 1.0);
    let w_pool = rng.uniform_tensor(&[3, 1, 1], -1.0, 1.0);
    let w_cpool = rng.uniform_tensor(&[1, SIDE, SIDE], -1.0, 1.0);
    let w_up = rng.uniform_tensor(&[3, 2 * SIDE, 2 * SIDE], -1.0, 1.0);
    let w_cat = rng.uniform_tensor(&[5, SIDE, SIDE], -1.0, 1.0);
    let w_diff = rng.uniform_tensor(&[6, SIDE, SIDE], -1.0, 1.0);

    let xs = vec![x.clone()];
    vec![
        Case {
            name: "conv2d",
            params: vec![x.clone(), k.clone(), b.clone()],
            loss: Box::new(move |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), Conv2dGeometry { stride: 1, padding: 1 })?;
                weighted_sum(g, y, &w_conv1)
            }),
        },
        Case {
            name: "conv2d_stride2",
            params: vec![x.clone(), k, b],
            loss: Box::new(move |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), Conv2dGeometry { stride: 2, padding: 1 })?;
                weighted_sum(g, y, &w_conv2)
            }),
        },
        Case {
            name: "sigmoid",
            params: xs.clone(),
            loss: Box::new({
                let w = w_full.clone();
                move |g, p| {
                    let y = g.sigmoid(p[0])?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        Case {
            name: "relu",
            params: xs.clone(),
            loss: Box::new({
                let w = w_full.clone();
                move |g, p| {
                    let y = g.relu(p[0])?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        Case {
            name: "exp",
            params: xs.clone(),
            loss: Box::new({
                let w = w_full.clone();
                move |g, p| {
                    let y = g.exp(p[0])?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        Case {
            name: "abs",
            params: xs.clone(),
            loss: Box::new({
                let w = w_full.clone();
                move |g, p| {
                    let y = g.abs(p[0])?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        Case {
            name: "global_pool",
            params: xs.clone(),
            loss: Box::new(move |g, p| {
                let a = g.global_pool(p[0], PoolMode::Avg)?;
                let m = g.global_pool(p[0], PoolMode::Max)?;
                let y = g.mul(a, m)?;
                weighted_sum(g, y, &w_pool)
            }),
        },
        Case {
            name: "channel_pool",
            params: xs.clone(),
            loss: Box::new(move |g, p| {
                let a = g.channel_pool(p[0], PoolMode::Avg)?;
                let m = g.channel_pool(p[0], PoolMode::Max)?;
                let y = g.add(a, m)?;
                weighted_sum(g, y, &w_cpool)
            }),
        },
        Case {
            name: "upsample",
            params: xs.clone(),
            loss: Box::new(move |g, p| {
                let y = g.upsample(p[0], 2)?;
                weighted_sum(g, y, &w_up)
            }),
        },
        Case {
            name: "difference",
            params: xs.clone(),
            loss: Box::new(move |g, p| {
                let h = g.difference(p[0], Direction::Horizontal)?;
                let v = g.difference(p[0], Direction::Vertical)?;
                let y = g.concat_channels(&[h, v])?;
                weighted_sum(g, y, &w_diff)
            }),
        },
        Case {
            name: "broadcast_arithmetic",
            params: vec![x.clone(), chan],
            loss: Box::new({
                let w = w_full.clone();
                move |g, p| {
                    let y = g.mul(p[0], p[1])?;
                    let y = g.add(y, p[1])?;
                    let y = g.sub(y, p[0])?;
                    let y = g.scale(y, 0.7)?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        Case {
            name: "slice_concat_reshape",
            params: xs.clone(),
            loss: Box::new(move |g, p| {
                let s = g.slice_channels(p[0], 1, 2)?;
                let c = g.concat_channels(&[s, p[0]])?;
                let r = g.reshape(c, &[5 * SIDE * SIDE])?;
                let r = g.reshape(r, &[5, SIDE, SIDE])?;
                weighted_sum(g, r, &w_cat)
            }),
        },
        Case {
            name: "mean_abs",
            params: vec![x, w_full],
            loss: Box::new(|g, p| {
                let d = g.sub(p[0], p[1])?;
                let m = g.mean_abs(d)?;
                let s = g.mean(p[0])?;
                let y = g.mul(m, s)?;
                g.sum(y)
            }),
        },
    ]
}

fn cbam_cases(rng: &mut Rng) -> Result<Vec<Case<'static>>> {
    let c = 32;
    let block = Cbam::init(c, DEFAULT_REDUCTION, rng)?;
    let f = rng.uniform_tensor(&[c, SIDE, SIDE], -1.0, 1.0);
    let w_chan = rng.uniform_tensor(&[c, 1, 1], -1.0, 1.0);
    let w_spatial = rng.uniform_tensor(&[1, SIDE, SIDE], -1.0, 1.0);
    let w_out = rng.uniform_tensor(&[c, SIDE, SIDE], -1.0, 1.0);

    let mut block_params = vec![f.clone()];
    block_params.extend(block.param_tensors());
    let channel_params = block_params[..3].to_vec();
    let spatial_params = vec![f.clone(), block_params[3].clone(), block_params[4].clone()];

    let net = ToyNet::conv_stack(3, &[8, 8], rng)?.insert_cbam(2, Cbam::init(8, 4, rng)?)?;
    let x = rng.uniform_tensor(&[3, SIDE, SIDE], -1.0, 1.0);
    let w_net = rng.uniform_tensor(&[8, SIDE, SIDE], -1.0, 1.0);
    let mut net_params = vec![x];
    net_params.extend(net.param_tensors());

    Ok(vec![
        Case {
            name: "cbam_channel_attention",
            params: channel_params,
            loss: Box::new(move |g, p| {
                let m = channel_attention_node(g, p[0], p[1], p[2])?;
                weighted_sum(g, m, &w_chan)
            }),
        },
        Case {
            name: "cbam_spatial_attention",
            params: spatial_params,
            loss: Box::new(move |g, p| {
                let m = spatial_attention_node(g, p[0], p[1], p[2])?;
                weighted_sum(g, m, &w_spatial)
            }),
        },
        Case {
            name: "cbam_block",
            params: block_params,
            loss: Box::new(move |g, p| {
                let t = cbam_node(g, p[0], CbamNodes::from_slice(&p[1..]))?;
                weighted_sum(g, t.output, &w_out)
            }),
        },
        Case {
            name: "cbam_in_conv_net",
            params: net_params,
            loss: Box::new(move |g, p| {
                let y = net.forward_node(g, p[0], &p[1..])?;
                weighted_sum(g, y, &w_net)
            }),
        },
    ])
}

fn retinex_cases(rng: &mut Rng) -> Result<Vec<Case<'static>>> {
    let decom = DecomNet::init(DecomConfig::default(), rng)?;
    let normal = rng.uniform_tensor(&[3, SIDE, SIDE], 0.2, 1.0);
    let low = normal.map(|v| 0.3 * v * v);
    let coeffs = LossCoefficients::default();

    let enhance = EnhanceNet::init(EnhanceConfig::default(), rng)?;
    let r = rng.uniform_tensor(&[3, SIDE, SIDE], 0.05, 1.0);
    let i = rng.uniform_tensor(&[1, SIDE, SIDE], 0.05, 1.0);
    let target = rng.uniform_tensor(&[3, SIDE, SIDE], 0.0, 1.0);

    Ok(vec![
        Case {
            name: "decom_net_loss",
            params: decom.param_tensors(),
            loss: Box::new(move |g, p| {
                let s = [g.leaf(low.clone()), g.leaf(normal.clone())];
                let (rl, il) = decom.forward_node(g, s[LOW], p)?;
                let (rn, inn) = decom.forward_node(g, s[NORMAL], p)?;
                decom_loss_node(g, [rl, rn], [il, inn], s, &coeffs)
            }),
        },
        Case {
            name: "enhance_net_loss",
            params: enhance.param_tensors(),
            loss: Box::new(move |g, p| {
                let rn = g.leaf(r.clone());
                let inode = g.leaf(i.clone());
                let sn = g.leaf(target.clone());
                let i_hat = enhance.forward_node(g, rn, inode, p)?;
                enhance_loss_node(g, rn, i_hat, sn, coeffs.g)
            }),
        },
    ])
}

/// Names of the cases [`run_suite`] would check for `target`.
pub fn case_names(target: Target) -> Result<Vec<&'static str>> {
    Ok(build(target, 0)?.iter().map(|c| c.name).collect())
}

fn build(target: Target, seed: u64) -> Result<Vec<Case<'static>>> {
    let root = Rng::new(seed);
    let mut cases = Vec::new();
    if matches!(target, Target::Primitives | Target::All) {
        cases.extend(primitive_cases(&mut root.fork(0)));
    }
    if matches!(target, Target::Cbam | Target::All) {
        cases.extend(cbam_cases(&mut root.fork(1))?);
    }
    if matches!(target, Target::Retinex | Target::All) {
        cases.extend(retinex_cases(&mut root.fork(2))?);
    }
    Ok(cases)
}

/// Runs every case for `target`; `on_entry` sees each result as it completes.
pub fn run_suite(
    target: Target,
    options: &SuiteOptions,
    mut on_entry: impl FnMut(&SuiteEntry),
) -> Result<Vec<SuiteEntry>> {
    let cases = build(target, options.seed)?;
    if let Some(name) = &options.corrupt {
        if !cases.iter().any(|c| c.name == name) {
            return Err(Error::invalid(format!("no gradient-check case named {name:?}")));
        }
    }
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let check = CheckOptions {
            max_coords_per_param: None,
            seed: options.seed,
            corrupt_analytic: options.corrupt.as_deref() == Some(case.name),
        };
        let report = finite_diff_check(&case.loss, &case.params, options.epsilon, &check)?;
        let entry = SuiteEntry {
            name: case.name.to_string(),
            report,
        };
        on_entry(&entry);
        out.push(entry);
    }
    Ok(out)
}
