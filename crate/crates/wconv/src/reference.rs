//! Naive reference implementations and numerical-checking utilities.
//!
//! Everything here is deliberately written as directly as possible, on a
//! separate code path from the production kernels in [`crate::conv`]: padded
//! buffers are materialised, loops follow the textbook definitions, and the
//! density matrix is multiplied inside the innermost loop instead of being
//! folded into the kernel. Tests and the CLI `selftest` compare the fast
//! paths against these.

use crate::conv::{ConvGeometry, KernelTensor};
use crate::density::DensityFunction;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-pads a `[C, H, W]` image by `pad` on both spatial sides.
fn padded_image(input: &Tensor, pad: usize) -> (Vec<f64>, usize, usize, usize) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut buf = vec![0.0; c_in * ph * pw];
    for c in 0..c_in {
        for y in 0..h {
            for x in 0..w {
                buf[(c * ph + y + pad) * pw + x + pad] = input.at(&[c, y, x]);
            }
        }
    }
    (buf, c_in, ph, pw)
}

/// Direct-summation standard convolution over a zero-padded copy of the
/// input.
pub fn naive_conv2d(input: &Tensor, kernels: &KernelTensor, geom: &ConvGeometry) -> Result<Tensor> {
    if input.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,H,W] input, got {:?}", input.shape())));
    }
    let k = kernels.k();
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let h_out = geom.out_extent(h, k)?;
    let w_out = geom.out_extent(w, k)?;
    let (padded, c_in, _ph, pw) = padded_image(input, geom.padding);
    if c_in != kernels.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, kernels expect {}",
            kernels.in_channels()
        )));
    }
    let ph = h + 2 * geom.padding;

    let mut out = Tensor::zeros(&[kernels.filters(), h_out, w_out])?;
    for f in 0..kernels.filters() {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = kernels.bias().data()[f];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * geom.stride + ky;
                            let ix = ox * geom.stride + kx;
                            debug_assert!(iy < ph);
                            acc += kernels.weights().at(&[f, c, ky, kx])
                                * padded[(c * ph + iy) * pw + ix];
                        }
                    }
                }
                out.set(&[f, oy, ox], acc);
            }
        }
    }
    Ok(out)
}

/// Direct-summation weighted convolution: the density value multiplies the
/// kernel weight inside the innermost loop.
pub fn naive_wconv2d(
    input: &Tensor,
    kernels: &KernelTensor,
    density: &DensityFunction,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    if density.k() != kernels.k() {
        return Err(Error::ShapeMismatch(format!(
            "density extent {} does not match kernel extent {}",
            density.k(),
            kernels.k()
        )));
    }
    let k = kernels.k();
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let h_out = geom.out_extent(h, k)?;
    let w_out = geom.out_extent(w, k)?;
    let (padded, c_in, ph, pw) = padded_image(input, geom.padding);
    let phi = density.phi();

    let mut out = Tensor::zeros(&[kernels.filters(), h_out, w_out])?;
    for f in 0..kernels.filters() {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = kernels.bias().data()[f];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * geom.stride + ky;
                            let ix = ox * geom.stride + kx;
                            debug_assert!(iy < ph && ix < pw);
                            acc += phi.at(&[ky, kx])
                                * kernels.weights().at(&[f, c, ky, kx])
                                * padded[(c * ph + iy) * pw + ix];
                        }
                    }
                }
                out.set(&[f, oy, ox], acc);
            }
        }
    }
    Ok(out)
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error between two gradients: the largest absolute difference
/// scaled by the largest gradient magnitude. Robust to individual elements
/// whose true gradient is zero.
pub fn gradient_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    max_abs_diff(analytic, numeric) / scale
}
