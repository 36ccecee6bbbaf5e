//! Decomposition and enhancement losses.
//!
//! `‖·‖₁` is the mean absolute value throughout, so magnitudes do not
//! depend on resolution.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::{Direction, PoolMode};
use crate::tensor::Tensor;

pub const LOW: usize = 0;
pub const NORMAL: usize = 1;

/// Weights of the decomposition loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    /// `recon[i][j]` weighs `‖R_i∘I_j − S_j‖₁`; index 0 is low-light, 1 normal-light.
    pub recon: [[f64; 2]; 2],
    /// Reflectance consistency weight.
    pub ir: f64,
    /// Illumination smoothness weight.
    pub is: f64,
    /// Structure-awareness strength inside the smoothness term.
    pub g: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            recon: [[1.0, 0.001], [0.001, 1.0]],
            ir: 0.01,
            is: 0.1,
            g: 10.0,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .recon
            .iter()
            .flatten()
            .chain([&self.ir, &self.is, &self.g]);
        for &v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "loss coefficients must be finite and non-negative, got {self:?}"
                )));
            }
        }
        if self.recon[LOW][LOW] <= 0.0 || self.recon[NORMAL][NORMAL] <= 0.0 {
            return Err(Error::invalid(
                "self-reconstruction weights must be positive",
            ));
        }
        Ok(())
    }

    pub fn scaled_recon(&self, k: f64) -> Self {
        let mut out = *self;
        for row in &mut out.recon {
            for v in row {
                *v *= k;
            }
        }
        out
    }
}

fn require_rgb(g: &Graph, id: NodeId, what: &str) -> Result<(usize, usize)> {
    match g.value(id).dims3()? {
        (3, h, w) => Ok((h, w)),
        (c, _, _) => Err(Error::shape(format!("{what} must have 3 channels, got {c}"))),
    }
}

fn require_map(g: &Graph, id: NodeId, what: &str, hw: (usize, usize)) -> Result<()> {
    match g.value(id).dims3()? {
        (1, h, w) if (h, w) == hw => Ok(()),
        (c, h, w) => Err(Error::shape(format!(
            "{what} must be 1×{}×{}, got {c}×{h}×{w}",
            hw.0, hw.1
        ))),
    }
}

fn require_same_rgb(g: &Graph, id: NodeId, what: &str, hw: (usize, usize)) -> Result<()> {
    if require_rgb(g, id, what)? != hw {
        return Err(Error::shape(format!(
            "{what} spatial size differs from {}×{}",
            hw.0, hw.1
        )));
    }
    Ok(())
}

/// `mean|a∘b − c|`.
fn l1_product(g: &mut Graph, a: NodeId, b: NodeId, c: NodeId) -> Result<NodeId> {
    let p = g.mul(a, b)?;
    let d = g.sub(p, c)?;
    g.mean_abs(d)
}

fn sum_all(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `Σ_i Σ_j λ_ij ‖R_i∘I_j − S_j‖₁` over `i, j ∈ {low, normal}`.
pub fn recon_loss_node(
    g: &mut Graph,
    r: [NodeId; 2],
    i: [NodeId; 2],
    s: [NodeId; 2],
    weights: &[[f64; 2]; 2],
) -> Result<NodeId> {
    let hw = require_rgb(g, s[LOW], "S_low")?;
    require_same_rgb(g, s[NORMAL], "S_normal", hw)?;
    for k in [LOW, NORMAL] {
        require_same_rgb(g, r[k], "reflectance", hw)?;
        require_map(g, i[k], "illumination", hw)?;
    }
    let mut terms = Vec::with_capacity(4);
    for a in [LOW, NORMAL] {
        for b in [LOW, NORMAL] {
            let lambda = weights[a][b];
            if lambda == 0.0 {
                continue;
            }
            let t = l1_product(g, r[a], i[b], s[b])?;
            terms.push(g.scale(t, lambda)?);
        }
    }
    if terms.is_empty() {
        let zero = g.leaf(Tensor::scalar(0.0));
        return Ok(zero);
    }
    sum_all(g, &terms)
}

/// `‖R_low − R_normal‖₁`.
pub fn reflectance_loss_node(g: &mut Graph, r_low: NodeId, r_normal: NodeId) -> Result<NodeId> {
    if g.value(r_low).shape() != g.value(r_normal).shape() {
        return Err(Error::shape(format!(
            "reflectances differ in shape: {:?} vs {:?}",
            g.value(r_low).shape(),
            g.value(r_normal).shape()
        )));
    }
    let d = g.sub(r_low, r_normal)?;
    g.mean_abs(d)
}

/// Structure-weighted total variation of one illumination map:
/// `Σ_dir mean(|∇I| ∘ exp(−λ_g |∇R̄|))`, with `R̄` the channel mean of `R`.
pub fn weighted_tv_node(
    g: &mut Graph,
    illumination: NodeId,
    reflectance: NodeId,
    lambda_g: f64,
) -> Result<NodeId> {
    let (_, h, w) = g.value(reflectance).dims3()?;
    require_map(g, illumination, "illumination", (h, w))?;
    let guide = g.channel_pool(reflectance, PoolMode::Avg)?;
    let mut terms = Vec::with_capacity(2);
    for dir in [Direction::Horizontal, Direction::Vertical] {
        let di = g.difference(illumination, dir)?;
        let di = g.abs(di)?;
        let weighted = if lambda_g == 0.0 {
            di
        } else {
            let dr = g.difference(guide, dir)?;
            let dr = g.abs(dr)?;
            let dr = g.scale(dr, -lambda_g)?;
            let e = g.exp(dr)?;
            g.mul(di, e)?
        };
        terms.push(g.mean(weighted)?);
    }
    sum_all(g, &terms)
}

/// `Σ_i ‖∇I_i ∘ exp(−λ_g ∇R_i)‖` over both images.
pub fn smoothness_loss_node(
    g: &mut Graph,
    i: [NodeId; 2],
    r: [NodeId; 2],
    lambda_g: f64,
) -> Result<NodeId> {
    let a = weighted_tv_node(g, i[LOW], r[LOW], lambda_g)?;
    let b = weighted_tv_node(g, i[NORMAL], r[NORMAL], lambda_g)?;
    g.add(a, b)
}

/// `L_recon + λ_ir·L_ir + λ_is·L_is` from decomposition outputs.
pub fn decom_loss_node(
    g: &mut Graph,
    r: [NodeId; 2],
    i: [NodeId; 2],
    s: [NodeId; 2],
    coeffs: &LossCoefficients,
) -> Result<NodeId> {
    let mut total = recon_loss_node(g, r, i, s, &coeffs.recon)?;
    if coeffs.ir != 0.0 {
        let l = reflectance_loss_node(g, r[LOW], r[NORMAL])?;
        let l = g.scale(l, coeffs.ir)?;
        total = g.add(total, l)?;
    }
    if coeffs.is != 0.0 {
        let l = smoothness_loss_node(g, i, r, coeffs.g)?;
        let l = g.scale(l, coeffs.is)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// `‖R_low∘Î − S_normal‖₁ + weighted TV of Î guided by R_low`.
pub fn enhance_loss_node(
    g: &mut Graph,
    r_low: NodeId,
    i_hat: NodeId,
    s_normal: NodeId,
    lambda_g: f64,
) -> Result<NodeId> {
    let hw = require_rgb(g, r_low, "R_low")?;
    require_same_rgb(g, s_normal, "S_normal", hw)?;
    require_map(g, i_hat, "adjusted illumination", hw)?;
    let recon = l1_product(g, r_low, i_hat, s_normal)?;
    let smooth = weighted_tv_node(g, i_hat, r_low, lambda_g)?;
    g.add(recon, smooth)
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).item())
}

pub fn loss_recon(
    r_low: &Tensor,
    r_normal: &Tensor,
    i_low: &Tensor,
    i_normal: &Tensor,
    s_low: &Tensor,
    s_normal: &Tensor,
    weights: &[[f64; 2]; 2],
) -> Result<f64> {
    eval(|g| {
        let r = [g.leaf(r_low.clone()), g.leaf(r_normal.clone())];
        let i = [g.leaf(i_low.clone()), g.leaf(i_normal.clone())];
        let s = [g.leaf(s_low.clone()), g.leaf(s_normal.clone())];
        recon_loss_node(g, r, i, s, weights)
    })
}

pub fn loss_ir(r_low: &Tensor, r_normal: &Tensor) -> Result<f64> {
    eval(|g| {
        let a = g.leaf(r_low.clone());
        let b = g.leaf(r_normal.clone());
        reflectance_loss_node(g, a, b)
    })
}

pub fn loss_is(
    i_low: &Tensor,
    i_normal: &Tensor,
    r_low: &Tensor,
    r_normal: &Tensor,
    lambda_g: f64,
) -> Result<f64> {
    eval(|g| {
        let i = [g.leaf(i_low.clone()), g.leaf(i_normal.clone())];
        let r = [g.leaf(r_low.clone()), g.leaf(r_normal.clone())];
        smoothness_loss_node(g, i, r, lambda_g)
    })
}

pub fn enhance_total_loss(
    r_low: &Tensor,
    i_hat: &Tensor,
    s_normal: &Tensor,
    lambda_g: f64,
) -> Result<f64> {
    eval(|g| {
        let r = g.leaf(r_low.clone());
        let i = g.leaf(i_hat.clone());
        let s = g.leaf(s_normal.clone());
        enhance_loss_node(g, r, i, s, lambda_g)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    fn only_low_low() -> [[f64; 2]; 2] {
        [[1.0, 0.0], [0.0, 0.0]]
    }

    #[test]
    fn recon_single_pixel_hand_value() {
        let r = Tensor::full(&[3, 1, 1], 0.5);
        let i = Tensor::full(&[1, 1, 1], 0.5);
        let s = Tensor::full(&[3, 1, 1], 0.2);
        let l = loss_recon(&r, &r, &i, &i, &s, &s, &only_low_low()).unwrap();
        assert_relative_eq!(l, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn recon_zero_at_perfect_reconstruction() {
        let mut rng = Rng::new(1);
        let r = rng.uniform_tensor(&[3, 4, 4], 0.0, 1.0);
        let i = rng.uniform_tensor(&[1, 4, 4], 0.0, 1.0);
        let s = Tensor::from_fn(&[3, 4, 4], |k| r.data()[k] * i.data()[k % 16]);
        let w = LossCoefficients::default().recon;
        assert_eq!(loss_recon(&r, &r, &i, &i, &s, &s, &w).unwrap(), 0.0);
    }

    #[test]
    fn recon_is_homogeneous_in_weights() {
        let mut rng = Rng::new(2);
        let t = |rng: &mut Rng, c| rng.uniform_tensor(&[c, 3, 5], 0.0, 1.0);
        let (r0, r1, i0, i1, s0, s1) = (
            t(&mut rng, 3),
            t(&mut rng, 3),
            t(&mut rng, 1),
            t(&mut rng, 1),
            t(&mut rng, 3),
            t(&mut rng, 3),
        );
        let c = LossCoefficients::default();
        let base = loss_recon(&r0, &r1, &i0, &i1, &s0, &s1, &c.recon).unwrap();
        let doubled = loss_recon(&r0, &r1, &i0, &i1, &s0, &s1, &c.scaled_recon(2.0).recon).unwrap();
        assert_relative_eq!(doubled, 2.0 * base, max_relative = 1e-14);
    }

    #[test]
    fn recon_rejects_shape_mismatch() {
        let r = Tensor::zeros(&[3, 2, 2]);
        let i = Tensor::zeros(&[1, 2, 3]);
        let w = only_low_low();
        assert!(loss_recon(&r, &r, &i, &i, &r, &r, &w).is_err());
        let r1 = Tensor::zeros(&[1, 2, 2]);
        assert!(loss_recon(&r1, &r1, &r1, &r1, &r1, &r1, &w).is_err());
    }

    #[test]
    fn reflectance_loss_cases() {
        let a = Tensor::full(&[3, 2, 2], 1.0);
        let b = Tensor::zeros(&[3, 2, 2]);
        assert_eq!(loss_ir(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_ir(&a, &b).unwrap(), 1.0);
        let mut rng = Rng::new(3);
        let x = rng.uniform_tensor(&[3, 4, 4], 0.0, 1.0);
        let y = rng.uniform_tensor(&[3, 4, 4], 0.0, 1.0);
        assert_eq!(loss_ir(&x, &y).unwrap(), loss_ir(&y, &x).unwrap());
        assert!(loss_ir(&x, &Tensor::zeros(&[3, 4, 3])).is_err());
    }

    #[test]
    fn smoothness_cases() {
        let mut rng = Rng::new(4);
        let r0 = rng.uniform_tensor(&[3, 5, 5], 0.0, 1.0);
        let r1 = rng.uniform_tensor(&[3, 5, 5], 0.0, 1.0);
        let flat = Tensor::full(&[1, 5, 5], 0.4);
        assert_eq!(loss_is(&flat, &flat, &r0, &r1, 10.0).unwrap(), 0.0);

        // λ_g = 0 leaves plain anisotropic TV
        let i0 = rng.uniform_tensor(&[1, 5, 5], 0.0, 1.0);
        let i1 = rng.uniform_tensor(&[1, 5, 5], 0.0, 1.0);
        let tv = |t: &Tensor| {
            let (gh, gv) = crate::ops::spatial_gradient(t).unwrap();
            gh.map(f64::abs).mean() + gv.map(f64::abs).mean()
        };
        let got = loss_is(&i0, &i1, &r0, &r1, 0.0).unwrap();
        assert_relative_eq!(got, tv(&i0) + tv(&i1), epsilon = 1e-12);
    }

    #[test]
    fn smoothness_ramp_hand_value() {
        // ∇h I = [1, 0, 0] for I = [0, 1, 1]; ∇v = 0; constant R leaves weight 1
        let i = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        let r = Tensor::full(&[3, 1, 3], 0.7);
        for lambda_g in [0.0, 3.0, 10.0] {
            let l = loss_is(&i, &i, &r, &r, lambda_g).unwrap();
            assert_relative_eq!(l, 2.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn enhance_loss_cases() {
        let r = Tensor::full(&[3, 1, 1], 1.0);
        let i = Tensor::full(&[1, 1, 1], 0.3);
        let s = Tensor::full(&[3, 1, 1], 0.5);
        assert_relative_eq!(enhance_total_loss(&r, &i, &s, 10.0).unwrap(), 0.2, epsilon = 1e-15);

        let mut rng = Rng::new(5);
        let r = rng.uniform_tensor(&[3, 4, 4], 0.0, 1.0);
        let i = Tensor::full(&[1, 4, 4], 0.6);
        let s = r.scale(0.6);
        assert_eq!(enhance_total_loss(&r, &i, &s, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn coefficient_validation() {
        assert!(LossCoefficients::default().validate().is_ok());
        let mut c = LossCoefficients::default();
        c.recon[0][0] = 0.0;
        assert!(c.validate().is_err());
        let mut c = LossCoefficients::default();
        c.ir = -0.1;
        assert!(c.validate().is_err());
    }
}
