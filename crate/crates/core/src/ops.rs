//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is a pure function of its arguments. The autodiff
//! tape in [`crate::autodiff`] calls the `*_backward` helpers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output indices `o` for which `o * stride + offset` lands inside `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

fn conv_output_dims(
    input: &Tensor,
    kernel: &Tensor,
    geom: Conv2dGeometry,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, k_in, kh, kw) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(format!(
                "conv kernel must be C_out×C_in×kH×kW, got {:?}",
                kernel.shape()
            )))
        }
    };
    if k_in != c_in {
        return Err(Error::shape(format!(
            "conv kernel expects {k_in} input channels but input has {c_in}"
        )));
    }
    if geom.stride == 0 {
        return Err(Error::invalid("conv stride must be at least 1"));
    }
    let (ph, pw) = (h + 2 * geom.padding, w + 2 * geom.padding);
    if kh > ph || kw > pw {
        return Err(Error::shape(format!(
            "kernel {kh}×{kw} larger than padded input {ph}×{pw}"
        )));
    }
    let ho = (ph - kh) / geom.stride + 1;
    let wo = (pw - kw) / geom.stride + 1;
    Ok((c_in, h, w, c_out, kh, kw, ho, wo))
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    geom: Conv2dGeometry,
) -> Result<Tensor> {
    let (c_in, h, w, c_out, kh, kw, ho, wo) = conv_output_dims(input, kernel, geom)?;
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape(format!(
                "conv bias has {} values for {c_out} output channels",
                b.numel()
            )));
        }
    }
    let p = ho * wo;
    let ckk = c_in * kh * kw;
    let cols = im2col(input.data(), (c_in, h, w), (kh, kw), (ho, wo), geom);
    let mut out = vec![0.0; c_out * p];
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(p).zip(b.data()) {
            plane.fill(bv);
        }
    }
    // out[c_out×P] += K[c_out×ckk] · cols[ckk×P]
    gemm(c_out, ckk, p, kernel.data(), (ckk, 1), &cols, (p, 1), &mut out, 1.0);
    Tensor::new(vec![c_out, ho, wo], out)
}

/// Unfolds input patches into a `(C_in·kH·kW) × (H_out·W_out)` matrix.
fn im2col(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    geom: Conv2dGeometry,
) -> Vec<f64> {
    let p = ho * wo;
    let pad = geom.padding as isize;
    let s = geom.stride;
    let mut cols = vec![0.0; c_in * kh * kw * p];
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky as isize - pad, s);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(wo, w, kx as isize - pad, s);
                let row = &mut cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = (oy * s + ky) as isize - pad;
                    let in_row = &plane[iy as usize * w..][..w];
                    let out_row = &mut row[oy * wo..][..wo];
                    for ox in ox_lo..ox_hi {
                        out_row[ox] = in_row[((ox * s + kx) as isize - pad) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column entries back onto the input.
fn col2im(
    cols: &[f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    geom: Conv2dGeometry,
) -> Vec<f64> {
    let p = ho * wo;
    let pad = geom.padding as isize;
    let s = geom.stride;
    let mut x = vec![0.0; c_in * h * w];
    for ci in 0..c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(ho, h, ky as isize - pad, s);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_range(wo, w, kx as isize - pad, s);
                let row = &cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = (oy * s + ky) as isize - pad;
                    let in_row = &mut plane[iy as usize * w..][..w];
                    let col_row = &row[oy * wo..][..wo];
                    for ox in ox_lo..ox_hi {
                        in_row[((ox * s + kx) as isize - pad) as usize] += col_row[ox];
                    }
                }
            }
        }
    }
    x
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with `(row, col)` strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: Conv2dGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w, c_out, kh, kw, ho, wo) = conv_output_dims(input, kernel, geom)?;
    if grad_out.shape() != [c_out, ho, wo] {
        return Err(Error::shape("conv output gradient shape"));
    }
    let p = ho * wo;
    let ckk = c_in * kh * kw;
    let g = grad_out.data();
    let cols = im2col(input.data(), (c_in, h, w), (kh, kw), (ho, wo), geom);
    let gb: Vec<f64> = g.chunks(p).map(|plane| plane.iter().sum()).collect();
    // gK[c_out×ckk] = g[c_out×P] · colsᵀ
    let mut gk = vec![0.0; c_out * ckk];
    gemm(c_out, p, ckk, g, (p, 1), &cols, (1, p), &mut gk, 0.0);
    // gcols[ckk×P] = Kᵀ · g
    let mut gcols = vec![0.0; ckk * p];
    gemm(ckk, c_out, p, kernel.data(), (1, ckk), g, (p, 1), &mut gcols, 0.0);
    let gx = col2im(&gcols, (c_in, h, w), (kh, kw), (ho, wo), geom);
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![c_out], gb)?,
    ))
}

/// Index of the first maximum in `values`.
pub(crate) fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        if v > best || i == 0 {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Per-channel mean or maximum over all spatial positions, `C×1×1`.
pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let out = input
        .data()
        .chunks(plane)
        .map(|p| match mode {
            PoolMode::Avg => p.iter().sum::<f64>() / plane as f64,
            PoolMode::Max => p[first_argmax(p.iter().copied())],
        })
        .collect();
    Tensor::new(vec![c, 1, 1], out)
}

pub fn global_pool_backward(input: &Tensor, mode: PoolMode, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let mut gx = vec![0.0; c * plane];
    for ch in 0..c {
        let g = grad_out.data()[ch];
        let src = &input.data()[ch * plane..(ch + 1) * plane];
        let dst = &mut gx[ch * plane..(ch + 1) * plane];
        match mode {
            PoolMode::Avg => dst.fill(g / plane as f64),
            PoolMode::Max => dst[first_argmax(src.iter().copied())] = g,
        }
    }
    Tensor::new(vec![c, h, w], gx)
}

/// Per-pixel mean or maximum across channels, `1×H×W`.
pub fn channelwise_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let x = input.data();
    let out = (0..plane)
        .map(|p| {
            let column = (0..c).map(|ch| x[ch * plane + p]);
            match mode {
                PoolMode::Avg => column.sum::<f64>() / c as f64,
                PoolMode::Max => x[first_argmax(column) * plane + p],
            }
        })
        .collect();
    Tensor::new(vec![1, h, w], out)
}

pub fn channelwise_pool_backward(
    input: &Tensor,
    mode: PoolMode,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; c * plane];
    for p in 0..plane {
        match mode {
            PoolMode::Avg => {
                for ch in 0..c {
                    gx[ch * plane + p] = g[p] / c as f64;
                }
            }
            PoolMode::Max => {
                let ch = first_argmax((0..c).map(|ch| x[ch * plane + p]));
                gx[ch * plane + p] = g[p];
            }
        }
    }
    Tensor::new(vec![c, h, w], gx)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Sigmoid => input.map(sigmoid),
        Activation::Relu => input.map(|x| x.max(0.0)),
    }
}

/// Gradient of an activation given its input and forward output.
pub fn activation_backward(
    input: &Tensor,
    output: &Tensor,
    kind: Activation,
    grad_out: &Tensor,
) -> Result<Tensor> {
    match kind {
        Activation::Sigmoid => {
            let local = output.map(|y| y * (1.0 - y));
            local.zip_with(grad_out, |l, g| l * g)
        }
        Activation::Relu => input.zip_with(grad_out, |x, g| if x > 0.0 { g } else { 0.0 }),
    }
}

/// Replicates each pixel into a `factor×factor` block.
pub fn nearest_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (c, h, w) = input.dims3()?;
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            let row = &x[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            out.extend((0..wo).map(|ox| row[ox / factor]));
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn nearest_upsample_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, ho, wo) = grad_out.dims3()?;
    let (h, w) = (ho / factor, wo / factor);
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[(ch * h + oy / factor) * w + ox / factor] += g[(ch * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::new(vec![c, h, w], gx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Horizontal,
    Vertical,
}

/// Forward difference along one axis; the last column (or row) is zero.
pub fn forward_difference(input: &Tensor, dir: Direction) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = (ch * h + y) * w + xx;
                out[i] = match dir {
                    Direction::Horizontal if xx + 1 < w => x[i + 1] - x[i],
                    Direction::Vertical if y + 1 < h => x[i + w] - x[i],
                    _ => 0.0,
                };
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn forward_difference_backward(grad_out: &Tensor, dir: Direction) -> Result<Tensor> {
    let (c, h, w) = grad_out.dims3()?;
    let g = grad_out.data();
    let mut gx = vec![0.0; g.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = (ch * h + y) * w + xx;
                match dir {
                    Direction::Horizontal if xx + 1 < w => {
                        gx[i + 1] += g[i];
                        gx[i] -= g[i];
                    }
                    Direction::Vertical if y + 1 < h => {
                        gx[i + w] += g[i];
                        gx[i] -= g[i];
                    }
                    _ => {}
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], gx)
}

/// Horizontal and vertical forward differences of a `C×H×W` map.
pub fn spatial_gradient(input: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        forward_difference(input, Direction::Horizontal)?,
        forward_difference(input, Direction::Vertical)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t2x2() -> Tensor {
        Tensor::from_chw(&[vec![vec![1.0, 2.0], vec![3.0, 4.0]]]).unwrap()
    }

    /// Direct definition of zero-padded cross-correlation, one output at a time.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, w) = x.dims3().unwrap();
        let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let padded = |c: usize, y: isize, xx: isize| {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.at3(c, y as usize, xx as usize)
            }
        };
        Tensor::from_fn(&[c_out, ho, wo], |i| {
            let co = i / (ho * wo);
            let oy = (i / wo) % ho;
            let ox = i % wo;
            let mut acc = 0.0;
            for ci in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        acc += k.data()[((co * c_in + ci) * kh + ky) * kw + kx] * padded(ci, y, xx);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 0.7 - 1.0);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[1])), Conv2dGeometry { stride: 1, padding: 1 })
            .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_2x2() {
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&t2x2(), &k, Some(&Tensor::zeros(&[1])), Conv2dGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_zero_output() {
        let x = Tensor::from_fn(&[2, 5, 7], |i| (i as f64).sin());
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let geom = Conv2dGeometry { stride: 2, padding: 1 };
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[3])), geom).unwrap();
        assert_eq!(y.shape(), &[3, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, None, Conv2dGeometry::default()).unwrap_err();
        assert!(err.to_string().contains("3 input channels"));
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = Rng::new(11);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 3), (3, 2)] {
            let x = rng.uniform_tensor(&[3, 9, 8], -1.0, 1.0);
            let k = rng.uniform_tensor(&[2, 3, 3, 5], -1.0, 1.0);
            let got = conv2d(&x, &k, None, Conv2dGeometry { stride, padding: pad }).unwrap();
            let want = conv_oracle(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn global_pool_examples() {
        let avg = global_pool(&t2x2(), PoolMode::Avg).unwrap();
        let max = global_pool(&t2x2(), PoolMode::Max).unwrap();
        assert_eq!(avg.data(), &[2.5]);
        assert_eq!(max.data(), &[4.0]);
        let c = Tensor::full(&[3, 4, 5], 1.25);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let p = global_pool(&c, mode).unwrap();
            assert_eq!(p.shape(), &[3, 1, 1]);
            assert!(p.data().iter().all(|&v| v == 1.25));
        }
    }

    #[test]
    fn channelwise_pool_examples() {
        let x = Tensor::new(vec![2, 1, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(channelwise_pool(&x, PoolMode::Avg).unwrap().data(), &[3.0]);
        assert_eq!(channelwise_pool(&x, PoolMode::Max).unwrap().data(), &[4.0]);

        let single = Tensor::from_fn(&[1, 3, 2], |i| i as f64 - 2.0);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert_eq!(channelwise_pool(&single, mode).unwrap(), single);
        }

        let flat = Tensor::from_fn(&[4, 2, 2], |i| (i % 4) as f64);
        assert_eq!(
            channelwise_pool(&flat, PoolMode::Avg).unwrap(),
            channelwise_pool(&flat, PoolMode::Max).unwrap()
        );
    }

    #[test]
    fn max_pool_gradient_goes_to_first_tie() {
        let x = Tensor::new(vec![1, 1, 3], vec![5.0, 1.0, 5.0]).unwrap();
        let g = global_pool_backward(&x, PoolMode::Max, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0]);
        let x = Tensor::new(vec![2, 1, 1], vec![3.0, 3.0]).unwrap();
        let g = channelwise_pool_backward(&x, PoolMode::Max, &Tensor::full(&[1, 1, 1], 2.0))
            .unwrap();
        assert_eq!(g.data(), &[2.0, 0.0]);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-30.0, -3.2, -0.1, 0.7, 12.0] {
            assert_relative_eq!(sigmoid(x) + sigmoid(-x), 1.0, epsilon = 1e-15);
            assert!(sigmoid(x) > 0.0 && sigmoid(x) < 1.0);
        }
        let r = activation(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        assert_eq!(nearest_upsample(&x, 1).unwrap(), x);
        let seven = nearest_upsample(&Tensor::full(&[1, 1, 1], 7.0), 2).unwrap();
        assert_eq!(seven.shape(), &[1, 2, 2]);
        assert!(seven.data().iter().all(|&v| v == 7.0));
        assert!(nearest_upsample(&x, 0).is_err());
    }

    #[test]
    fn spatial_gradient_examples() {
        let ramp = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let (gh, gv) = spatial_gradient(&ramp).unwrap();
        assert_eq!(gh.data(), &[1.0, 1.0, 0.0]);
        assert_eq!(gv.data(), &[0.0, 0.0, 0.0]);

        let flat = Tensor::full(&[3, 4, 5], 0.3);
        let (gh, gv) = spatial_gradient(&flat).unwrap();
        assert_eq!(gh.shape(), flat.shape());
        assert_eq!(gv.shape(), flat.shape());
        assert!(gh.data().iter().chain(gv.data()).all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn stride2_down_then_up_preserves_even_shape(
            half_h in 1usize..8, half_w in 1usize..8, c in 1usize..4
        ) {
            let (h, w) = (2 * half_h, 2 * half_w);
            let x = Tensor::full(&[c, h, w], 0.5);
            let k = Tensor::full(&[c, c, 3, 3], 0.1);
            let down = conv2d(&x, &k, None, Conv2dGeometry { stride: 2, padding: 1 }).unwrap();
            let up = nearest_upsample(&down, 2).unwrap();
            prop_assert_eq!(up.shape(), x.shape());
        }

        #[test]
        fn conv_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = Rng::new(seed);
            let x = rng.uniform_tensor(&[2, 6, 5], -1.0, 1.0);
            let y = rng.uniform_tensor(&[2, 6, 5], -1.0, 1.0);
            let k = rng.uniform_tensor(&[3, 2, 3, 3], -1.0, 1.0);
            let geom = Conv2dGeometry { stride: 1, padding: 1 };
            let mix = x.zip_with(&y, |p, q| a * p + b * q).unwrap();
            let lhs = conv2d(&mix, &k, None, geom).unwrap();
            let rhs = conv2d(&x, &k, None, geom).unwrap()
                .zip_with(&conv2d(&y, &k, None, geom).unwrap(), |p, q| a * p + b * q)
                .unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);

            let k2 = rng.uniform_tensor(&[3, 2, 3, 3], -1.0, 1.0);
            let kmix = k.zip_with(&k2, |p, q| a * p + b * q).unwrap();
            let lhs = conv2d(&x, &kmix, None, geom).unwrap();
            let rhs = conv2d(&x, &k, None, geom).unwrap()
                .zip_with(&conv2d(&x, &k2, None, geom).unwrap(), |p, q| a * p + b * q)
                .unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn avg_pool_never_exceeds_max_pool(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let x = rng.uniform_tensor(&[4, 3, 5], -10.0, 10.0);
            let avg = global_pool(&x, PoolMode::Avg).unwrap();
            let max = global_pool(&x, PoolMode::Max).unwrap();
            for (a, m) in avg.data().iter().zip(max.data()) {
                prop_assert!(a <= m);
            }
        }
    }
}
