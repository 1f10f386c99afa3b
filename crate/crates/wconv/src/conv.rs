//! Standard and density-weighted 2D convolution with analytic gradients.
//!
//! The weighted forward pass refreshes `W_phi = phi . W` (elementwise, one
//! shared `phi` across filters and channels) on every call and then runs the
//! same direct-convolution code path as the standard operator, so a uniform
//! density reproduces standard convolution bit for bit. Per output element
//! the accumulation order is fixed: bias, then channel, kernel row, kernel
//! column.

use std::time::Instant;

use crate::density::DensityFunction;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Bank of convolution filters: weights `[F, C_in, K, K]` plus one bias per
/// filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    weights: Tensor,
    bias: Tensor,
}

impl KernelTensor {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!("kernel weights must be [F,C,K,K], got {shape:?}")));
        }
        let (f, k_a, k_b) = (shape[0], shape[2], shape[3]);
        if k_a != k_b {
            return Err(Error::InvalidArgument(format!("kernels must be square, got {k_a}x{k_b}")));
        }
        if k_a % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel extent must be odd, got {k_a}")));
        }
        if bias.shape() != [f] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?} does not match filter count {f}",
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(filters: usize, in_channels: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[filters, in_channels, k, k])?, Tensor::zeros(&[filters])?)
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    /// Simultaneous mutable access to weights and bias.
    pub fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weights, &mut self.bias)
    }

    /// Number of trainable parameters (weights plus biases). Attaching a
    /// density does not change it.
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Spatial geometry of a convolution: zero padding and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(padding: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(Self { padding, stride })
    }

    /// Resolution-preserving geometry for an odd kernel extent: padding
    /// `(k-1)/2`, stride 1.
    pub fn same(k: usize) -> Self {
        Self { padding: (k - 1) / 2, stride: 1 }
    }

    /// Output extent for one spatial dimension; the stride must divide the
    /// padded span exactly and the result must be positive.
    pub fn out_extent(&self, in_extent: usize, k: usize) -> Result<usize> {
        let span = in_extent + 2 * self.padding;
        if k > span {
            return Err(Error::ShapeMismatch(format!(
                "kernel extent {k} exceeds padded input extent {span}"
            )));
        }
        if (span - k) % self.stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "stride {} does not divide padded span {} - {k}",
                self.stride, span
            )));
        }
        Ok((span - k) / self.stride + 1)
    }
}

/// Validated dimensions of one convolution instance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.f * self.h_out * self.w_out
    }
}

pub(crate) fn conv_dims(input_shape: &[usize], kernels: &KernelTensor, geom: &ConvGeometry) -> Result<ConvDims> {
    if input_shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,H,W] input, got {input_shape:?}")));
    }
    let (c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if c_in != kernels.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, kernels expect {}",
            kernels.in_channels()
        )));
    }
    let k = kernels.k();
    Ok(ConvDims {
        c_in,
        h,
        w,
        f: kernels.filters(),
        k,
        h_out: geom.out_extent(h, k)?,
        w_out: geom.out_extent(w, k)?,
        padding: geom.padding,
        stride: geom.stride,
    })
}

/// Direct convolution on raw slices; `out` must hold `d.out_len()` elements.
pub(crate) fn forward_raw(input: &[f64], weights: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (k, pad, stride) = (d.k, d.padding as isize, d.stride);
    for f in 0..d.f {
        let b = bias[f];
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut acc = b;
                let y0 = (oy * stride) as isize - pad;
                let x0 = (ox * stride) as isize - pad;
                let kx_lo = (-x0).max(0) as usize;
                let kx_hi = (d.w as isize - x0).min(k as isize).max(0) as usize;
                for c in 0..d.c_in {
                    for ky in 0..k {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let w_row = &weights[((f * d.c_in + c) * k + ky) * k..][..k];
                        let i_row = &input[(c * d.h + iy as usize) * d.w..][..d.w];
                        for kx in kx_lo..kx_hi {
                            acc += w_row[kx] * i_row[(x0 + kx as isize) as usize];
                        }
                    }
                }
                out[(f * d.h_out + oy) * d.w_out + ox] = acc;
            }
        }
    }
}

/// Gradients of the forward map, accumulated (`+=`) into the three buffers.
pub(crate) fn backward_raw(
    input: &[f64],
    weights: &[f64],
    d: &ConvDims,
    upstream: &[f64],
    grad_input: &mut [f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) {
    let (k, pad, stride) = (d.k, d.padding as isize, d.stride);
    for f in 0..d.f {
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let g = upstream[(f * d.h_out + oy) * d.w_out + ox];
                grad_bias[f] += g;
                if g == 0.0 {
                    continue;
                }
                let y0 = (oy * stride) as isize - pad;
                let x0 = (ox * stride) as isize - pad;
                let kx_lo = (-x0).max(0) as usize;
                let kx_hi = (d.w as isize - x0).min(k as isize).max(0) as usize;
                for c in 0..d.c_in {
                    for ky in 0..k {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row = (c * d.h + iy as usize) * d.w;
                        let w_row = ((f * d.c_in + c) * k + ky) * k;
                        for kx in kx_lo..kx_hi {
                            let ix = (x0 + kx as isize) as usize;
                            grad_weights[w_row + kx] += g * input[row + ix];
                            grad_input[row + ix] += g * weights[w_row + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Standard convolution of a `[C_in, H, W]` image, producing
/// `[F, H_out, W_out]`: per output element the Frobenius inner product of
/// the filter with the zero-padded neighbourhood, summed over channels,
/// plus bias.
pub fn conv2d_forward(input: &Tensor, kernels: &KernelTensor, geom: &ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input.shape(), kernels, geom)?;
    let mut out = vec![0.0; d.out_len()];
    forward_raw(input.data(), kernels.weights().data(), kernels.bias().data(), &d, &mut out);
    Tensor::new(&[d.f, d.h_out, d.w_out], out)
}

/// Multiplies every filter/channel slice of the kernel bank elementwise by
/// the shared density matrix, leaving the originals untouched.
pub fn apply_density(kernels: &KernelTensor, density: &DensityFunction) -> Result<KernelTensor> {
    let k = kernels.k();
    if density.k() != k {
        return Err(Error::ShapeMismatch(format!(
            "density extent {} does not match kernel extent {k}",
            density.k()
        )));
    }
    let phi = density.phi().data();
    let mut weights = kernels.weights().data().to_vec();
    let plane = k * k;
    for slice in weights.chunks_exact_mut(plane) {
        for (wv, pv) in slice.iter_mut().zip(phi) {
            *wv *= pv;
        }
    }
    KernelTensor::new(
        Tensor::new(kernels.weights().shape(), weights)?,
        kernels.bias().clone(),
    )
}

/// Weighted convolution: refreshes `W_phi` from the raw weights and runs the
/// standard forward pass with it.
pub fn wconv2d_forward(
    input: &Tensor,
    kernels: &KernelTensor,
    density: &DensityFunction,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let weighted = apply_density(kernels, density)?;
    conv2d_forward(input, &weighted, geom)
}

/// Gradients returned by the convolution backward passes.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Analytic gradients of [`conv2d_forward`] with respect to the input,
/// weights, and bias, given the upstream gradient `[F, H_out, W_out]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &KernelTensor,
    geom: &ConvGeometry,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let d = conv_dims(input.shape(), kernels, geom)?;
    if upstream.shape() != [d.f, d.h_out, d.w_out] {
        return Err(Error::ShapeMismatch(format!(
            "upstream shape {:?} does not match output [{}, {}, {}]",
            upstream.shape(),
            d.f,
            d.h_out,
            d.w_out
        )));
    }
    let mut grad_input = vec![0.0; d.in_len()];
    let mut grad_weights = vec![0.0; kernels.weights().len()];
    let mut grad_bias = vec![0.0; d.f];
    backward_raw(
        input.data(),
        kernels.weights().data(),
        &d,
        upstream.data(),
        &mut grad_input,
        &mut grad_weights,
        &mut grad_bias,
    );
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        weights: Tensor::new(kernels.weights().shape(), grad_weights)?,
        bias: Tensor::new(&[d.f], grad_bias)?,
    })
}

/// Gradients of [`wconv2d_forward`] with respect to the raw weights `W`
/// (the density stays a fixed hyperparameter): the chain rule multiplies
/// the `W_phi` gradient elementwise by `phi`.
pub fn wconv2d_backward(
    input: &Tensor,
    kernels: &KernelTensor,
    density: &DensityFunction,
    geom: &ConvGeometry,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let weighted = apply_density(kernels, density)?;
    let grads = conv2d_backward(input, &weighted, geom, upstream)?;
    let phi = density.phi().data();
    let k = kernels.k();
    let mut grad_weights = grads.weights;
    let plane = k * k;
    for slice in grad_weights.data_mut().chunks_exact_mut(plane) {
        for (gv, pv) in slice.iter_mut().zip(phi) {
            *gv *= pv;
        }
    }
    Ok(ConvGrads { input: grads.input, weights: grad_weights, bias: grads.bias })
}

/// Median wall-clock seconds of the standard and weighted forward pass on
/// the same random `[c, n, n]` input with `f` filters of extent `k`.
/// Measurements are interleaved rep by rep to decorrelate load drift.
pub fn overhead_benchmark(n: usize, c: usize, f: usize, k: usize, reps: usize) -> Result<(f64, f64)> {
    if reps < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 reps, got {reps}")));
    }
    let mut rng = Rng::new(0x0bec);
    let input = Tensor::fill_uniform(&[c, n, n], -1.0, 1.0, &mut rng)?;
    let kernels = KernelTensor::new(
        Tensor::fill_uniform(&[f, c, k, k], -1.0, 1.0, &mut rng)?,
        Tensor::fill_uniform(&[f], -0.1, 0.1, &mut rng)?,
    )?;
    let density = crate::density::build_density(k, 1.0, &vec![0.8; (k - 1) / 2])?;
    let geom = ConvGeometry::same(k);

    for _ in 0..3 {
        std::hint::black_box(conv2d_forward(&input, &kernels, &geom)?);
        std::hint::black_box(wconv2d_forward(&input, &kernels, &density, &geom)?);
    }

    let mut t_standard = Vec::with_capacity(reps);
    let mut t_weighted = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(conv2d_forward(&input, &kernels, &geom)?);
        t_standard.push(t.elapsed().as_secs_f64());

        let t = Instant::now();
        std::hint::black_box(wconv2d_forward(&input, &kernels, &density, &geom)?);
        t_weighted.push(t.elapsed().as_secs_f64());
    }
    Ok((median(&mut t_standard), median(&mut t_weighted)))
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}
