//! Central finite-difference verification of [`Graph::backward`].

use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor for the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Default probe step.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Pass threshold on the maximum relative error.
pub const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    /// Probe at most this many seeded-random coordinates per parameter; all when `None`.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Negative-control hook: skews every analytic gradient so the check must fail.
    pub corrupt_analytic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The probe interval crosses a ReLU, `|·|` or max-pool branch change,
    /// so the difference quotient is not a derivative estimate there.
    pub straddles_kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// Maximum over probes that do not straddle a kink.
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes excluded from `max_rel_error` because they straddle a kink.
    pub kinks: usize,
    pub worst: Option<Probe>,
}

impl CheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.leaf(p.clone())).collect();
    let loss = f(&mut graph, &ids)?;
    Ok((graph, ids, loss))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// `(f(p+ε) − f(p−ε)) / 2ε` coordinate by coordinate.
///
/// `f` builds its computation on the supplied graph from one leaf per
/// entry of `params` and returns the loss node.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    options: &CheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let (graph, ids, loss) = evaluate(&f, params)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(id)).collect();

    let mut rng = Rng::new(options.seed);
    let mut coords = Vec::new();
    for (p, tensor) in params.iter().enumerate() {
        let n = tensor.numel();
        match options.max_coords_per_param {
            Some(m) if m < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(m);
                all.sort_unstable();
                coords.extend(all.into_iter().map(|c| (p, c)));
            }
            _ => coords.extend((0..n).map(|c| (p, c))),
        }
    }

    let probes: Vec<Probe> = coords
        .par_iter()
        .map(|&(p, c)| {
            let at = |delta: f64| -> Result<(f64, bool)> {
                let mut shifted = params.to_vec();
                shifted[p].data_mut()[c] += delta;
                let (g, _, l) = evaluate(&f, &shifted).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!(
                        "parameter {p} coordinate {c} shifted by {delta:e}: {m}"
                    )),
                    other => other,
                })?;
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at parameter {p} coordinate {c} shifted by {delta:e}"
                    )));
                }
                Ok((v, graph.same_branches(&g)))
            };
            let (up, up_same) = at(epsilon)?;
            let (down, down_same) = at(-epsilon)?;
            let numeric = (up - down) / (2.0 * epsilon);
            let mut a = analytic[p].data()[c];
            if options.corrupt_analytic {
                a += 1e-2 * (1.0 + a.abs());
            }
            Ok(Probe {
                param: p,
                coord: c,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
                straddles_kink: !(up_same && down_same),
            })
        })
        .collect::<Result<_>>()?;

    let worst = probes
        .iter()
        .filter(|pr| !pr.straddles_kink)
        .fold(None::<&Probe>, |best, pr| match best {
            Some(b) if b.rel_error >= pr.rel_error => Some(b),
            _ => Some(pr),
        })
        .cloned();
    Ok(CheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        probes: probes.len(),
        kinks: probes.iter().filter(|pr| pr.straddles_kink).count(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{Conv2dGeometry, Direction, PoolMode};

    fn check(
        f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync,
        params: &[Tensor],
    ) -> CheckReport {
        finite_diff_check(f, params, DEFAULT_EPSILON, &CheckOptions::default()).unwrap()
    }

    #[test]
    fn quadratic_is_essentially_exact() {
        let x = Rng::new(4).uniform_tensor(&[2, 3, 3], -1.0, 1.0);
        let report = check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            },
            &[x],
        );
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.probes, 18);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let x = Tensor::full(&[1], 1.0);
        for eps in [0.0, -1e-5, f64::NAN] {
            let res = finite_diff_check(|g, p| g.sum(p[0]), std::slice::from_ref(&x), eps, &Default::default());
            assert!(res.is_err());
        }
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // exp overflows once the probe pushes x past ~709.78
        let x = Tensor::full(&[1], 709.782_712_893_384);
        let res = finite_diff_check(
            |g, p| {
                let e = g.exp(p[0])?;
                g.sum(e)
            },
            &[x],
            1e-3,
            &Default::default(),
        );
        assert!(matches!(res, Err(Error::NonFinite(_))), "{res:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Rng::new(4).uniform_tensor(&[4], -1.0, 1.0);
        let opts = CheckOptions {
            corrupt_analytic: true,
            ..Default::default()
        };
        let report = finite_diff_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            },
            &[x],
            DEFAULT_EPSILON,
            &opts,
        )
        .unwrap();
        assert!(!report.passed(PASS_THRESHOLD));
    }

    #[test]
    fn every_primitive_passes() {
        let mut rng = Rng::new(77);
        let x = rng.uniform_tensor(&[3, 6, 5], -1.0, 1.0);
        let k = rng.uniform_tensor(&[2, 3, 3, 3], -0.5, 0.5);
        let b = rng.uniform_tensor(&[2], -0.5, 0.5);
        let w = rng.uniform_tensor(&[3, 6, 5], -1.0, 1.0);
        let chan = rng.uniform_tensor(&[3, 1, 1], -1.0, 1.0);

        type Case = (&'static str, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync>);
        let cases: Vec<Case> = vec![
            ("conv2d", Box::new(|g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), Conv2dGeometry { stride: 2, padding: 1 })?;
                let y = g.mul(y, y)?;
                g.sum(y)
            })),
            ("sigmoid", Box::new(|g, p| {
                let y = g.sigmoid(p[0])?;
                let y = g.mul(y, p[3])?;
                g.sum(y)
            })),
            ("relu", Box::new(|g, p| {
                let y = g.relu(p[0])?;
                let y = g.mul(y, p[3])?;
                g.sum(y)
            })),
            ("global_pool", Box::new(|g, p| {
                let a = g.global_pool(p[0], PoolMode::Avg)?;
                let m = g.global_pool(p[0], PoolMode::Max)?;
                let y = g.mul(a, m)?;
                let y = g.mul(y, p[4])?;
                g.sum(y)
            })),
            ("channel_pool", Box::new(|g, p| {
                let a = g.channel_pool(p[0], PoolMode::Avg)?;
                let m = g.channel_pool(p[0], PoolMode::Max)?;
                let y = g.mul(a, m)?;
                g.sum(y)
            })),
            ("upsample", Box::new(|g, p| {
                let y = g.upsample(p[0], 2)?;
                let y = g.mul(y, y)?;
                g.sum(y)
            })),
            ("difference", Box::new(|g, p| {
                let h = g.difference(p[0], Direction::Horizontal)?;
                let v = g.difference(p[0], Direction::Vertical)?;
                let y = g.mul(h, v)?;
                let y = g.mul(y, p[3])?;
                g.sum(y)
            })),
            ("exp_abs_mean", Box::new(|g, p| {
                let e = g.exp(p[0])?;
                let d = g.sub(e, p[3])?;
                g.mean_abs(d)
            })),
            ("broadcast", Box::new(|g, p| {
                let y = g.mul(p[0], p[4])?;
                let y = g.add(y, p[4])?;
                let s = g.slice_channels(y, 1, 2)?;
                let c = g.concat_channels(&[s, y])?;
                let c = g.scale(c, 0.7)?;
                let c = g.mul(c, c)?;
                g.mean(c)
            })),
        ];
        let params = [x, k, b, w, chan];
        for (name, f) in cases {
            let report = check(f, &params);
            assert!(report.passed(PASS_THRESHOLD), "{name}: {report:?}");
        }
    }

    #[test]
    fn kink_straddling_probes_are_flagged_and_excluded() {
        let x = Tensor::new(vec![3], vec![3e-6, 0.5, -0.25]).unwrap();
        let abs_sum = |g: &mut Graph, p: &[NodeId]| {
            let a = g.abs(p[0])?;
            g.sum(a)
        };
        let report = check(abs_sum, std::slice::from_ref(&x));
        assert_eq!((report.probes, report.kinks), (3, 1));
        assert!(report.max_rel_error < 1e-8, "{report:?}");

        let far = Tensor::new(vec![3], vec![3e-4, 0.5, -0.25]).unwrap();
        assert_eq!(check(abs_sum, &[far]).kinks, 0);

        let relu_max = |g: &mut Graph, p: &[NodeId]| {
            let r = g.relu(p[0])?;
            let m = g.global_pool(r, PoolMode::Max)?;
            g.sum(m)
        };
        let t = Tensor::new(vec![1, 1, 3], vec![0.4, 0.4 + 4e-6, -3e-6]).unwrap();
        let report = check(relu_max, &[t]);
        assert_eq!(report.kinks, 3, "{report:?}");
    }
}
