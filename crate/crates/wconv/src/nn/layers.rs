//! Layers with analytic backward passes.
//!
//! Layers operate on batched tensors (`[B, C, H, W]` through the conv stack,
//! `[B, N]` after flattening). Forward in training mode caches whatever the
//! backward pass needs; backward returns the gradient with respect to the
//! layer input and accumulates parameter gradients into same-shaped slots.

use rayon::prelude::*;

use crate::conv::{apply_density, backward_raw, conv_dims, forward_raw, ConvGeometry, KernelTensor};
use crate::density::DensityFunction;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode: training caches intermediates and uses batch
/// statistics; evaluation is stateless and deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn no_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward called before forward"))
}

/// Convolution layer, optionally carrying a density function. With a density
/// attached, `W_phi = phi . W` is refreshed from the raw weights on every
/// forward call; gradients are taken with respect to the raw weights so the
/// density stays a fixed hyperparameter.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub(crate) kernels: KernelTensor,
    pub(crate) density: Option<DensityFunction>,
    pub(crate) geom: ConvGeometry,
    grad_weights: Tensor,
    grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl ConvLayer {
    pub fn new(kernels: KernelTensor, density: Option<DensityFunction>, geom: ConvGeometry) -> Result<Self> {
        if let Some(d) = &density {
            if d.k() != kernels.k() {
                return Err(Error::ShapeMismatch(format!(
                    "density extent {} does not match kernel extent {}",
                    d.k(),
                    kernels.k()
                )));
            }
        }
        let grad_weights = kernels.weights().zeros_like();
        let grad_bias = kernels.bias().zeros_like();
        Ok(Self { kernels, density, geom, grad_weights, grad_bias, cached_input: None })
    }

    pub fn kernels(&self) -> &KernelTensor {
        &self.kernels
    }

    pub fn density(&self) -> Option<&DensityFunction> {
        self.density.as_ref()
    }

    /// Swaps the attached density (used by the harness to re-run a recipe at
    /// another grid point without rebuilding the model).
    pub fn set_density(&mut self, density: Option<DensityFunction>) -> Result<()> {
        if let Some(d) = &density {
            if d.k() != self.kernels.k() {
                return Err(Error::ShapeMismatch(format!(
                    "density extent {} does not match kernel extent {}",
                    d.k(),
                    self.kernels.k()
                )));
            }
        }
        self.density = density;
        Ok(())
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        if in_shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!("conv expects [B,C,H,W], got {in_shape:?}")));
        }
        let d = conv_dims(&in_shape[1..], &self.kernels, &self.geom)?;
        Ok(vec![in_shape[0], d.f, d.h_out, d.w_out])
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out_shape = self.out_shape(input.shape())?;
        let dims = conv_dims(&input.shape()[1..], &self.kernels, &self.geom)?;
        let weighted;
        let eff = match &self.density {
            Some(d) => {
                weighted = apply_density(&self.kernels, d)?;
                &weighted
            }
            None => &self.kernels,
        };
        let batch = input.shape()[0];
        let mut out = vec![0.0; batch * dims.out_len()];
        out.par_chunks_mut(dims.out_len())
            .zip(input.data().par_chunks(dims.in_len()))
            .for_each(|(o, i)| forward_raw(i, eff.weights().data(), eff.bias().data(), &dims, o));
        if mode == Mode::Train {
            self.cached_input = Some(input.clone());
        }
        Tensor::new(&out_shape, out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cached_input.take().ok_or_else(|| no_cache("conv"))?;
        let dims = conv_dims(&input.shape()[1..], &self.kernels, &self.geom)?;
        let batch = input.shape()[0];
        if upstream.shape() != [batch, dims.f, dims.h_out, dims.w_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv backward: upstream {:?} does not match output",
                upstream.shape()
            )));
        }
        let weighted;
        let eff = match &self.density {
            Some(d) => {
                weighted = apply_density(&self.kernels, d)?;
                &weighted
            }
            None => &self.kernels,
        };

        let w_len = self.kernels.weights().len();
        let mut grad_input = vec![0.0; input.len()];
        // Per-sample partials, reduced in sample order below so parallel
        // execution stays deterministic.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_input
            .par_chunks_mut(dims.in_len())
            .zip(input.data().par_chunks(dims.in_len()))
            .zip(upstream.data().par_chunks(dims.out_len()))
            .map(|((gi, inp), up)| {
                let mut gw = vec![0.0; w_len];
                let mut gb = vec![0.0; dims.f];
                backward_raw(inp, eff.weights().data(), &dims, up, gi, &mut gw, &mut gb);
                (gw, gb)
            })
            .collect();

        let mut gw_total = vec![0.0; w_len];
        let mut gb_total = vec![0.0; dims.f];
        for (gw, gb) in &partials {
            for (t, v) in gw_total.iter_mut().zip(gw) {
                *t += v;
            }
            for (t, v) in gb_total.iter_mut().zip(gb) {
                *t += v;
            }
        }
        // Chain rule back to the raw weights: elementwise phi.
        if let Some(d) = &self.density {
            let phi = d.phi().data();
            let plane = self.kernels.k() * self.kernels.k();
            for slice in gw_total.chunks_exact_mut(plane) {
                for (g, p) in slice.iter_mut().zip(phi) {
                    *g *= p;
                }
            }
        }
        for (slot, v) in self.grad_weights.data_mut().iter_mut().zip(&gw_total) {
            *slot += v;
        }
        for (slot, v) in self.grad_bias.data_mut().iter_mut().zip(&gb_total) {
            *slot += v;
        }
        Tensor::new(input.shape(), grad_input)
    }

    pub fn params(&self) -> Vec<(&Tensor, &Tensor)> {
        vec![(self.kernels.weights(), &self.grad_weights), (self.kernels.bias(), &self.grad_bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        let (weights, bias) = self.kernels.parts_mut();
        vec![(weights, &mut self.grad_weights), (bias, &mut self.grad_bias)]
    }
}

/// Rectified linear unit.
#[derive(Debug, Clone, Default)]
pub struct ReLU {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl ReLU {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = input.map(|v| v.max(0.0));
        if mode == Mode::Train {
            self.mask = Some((input.shape().to_vec(), input.data().iter().map(|&v| v > 0.0).collect()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self.mask.take().ok_or_else(|| no_cache("relu"))?;
        if upstream.shape() != &shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "relu backward: upstream {:?} vs cached {:?}",
                upstream.shape(),
                shape
            )));
        }
        let data = upstream.data().iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        Tensor::new(&shape, data)
    }
}

/// Batch normalization over the channel axis of `[B, C, H, W]`.
///
/// Training mode normalizes with biased batch statistics and updates running
/// statistics as `running = momentum * running + (1 - momentum) * batch`;
/// evaluation mode is a fixed affine map using the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    pub(crate) running_mean: Tensor,
    pub(crate) running_var: Tensor,
    pub(crate) momentum: f64,
    pub(crate) eps: f64,
    grad_gamma: Tensor,
    grad_beta: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            momentum: 0.9,
            eps: 1e-5,
            grad_gamma: Tensor::zeros(&[channels])?,
            grad_beta: Tensor::zeros(&[channels])?,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm expects [B,{},H,W], got {shape:?}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let (b, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let plane = h * w;
        let n = (b * plane) as f64;
        let x = input.data();
        let mut out = vec![0.0; x.len()];
        let mut x_hat = vec![0.0; x.len()];
        let mut inv_std_all = vec![0.0; c];

        for ch in 0..c {
            let (mean, var, inv_std) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for s in 0..plane {
                            sum += x[base + s];
                        }
                    }
                    let mean = sum / n;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for s in 0..plane {
                            let d = x[base + s] - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / n;
                    (mean, var, 1.0 / (var + self.eps).sqrt())
                }
                Mode::Eval => {
                    let mean = self.running_mean.data()[ch];
                    let var = self.running_var.data()[ch];
                    (mean, var, 1.0 / (var + self.eps).sqrt())
                }
            };
            if mode == Mode::Train {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = self.momentum * *rm + (1.0 - self.momentum) * mean;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = self.momentum * *rv + (1.0 - self.momentum) * var;
            }
            inv_std_all[ch] = inv_std;
            let g = self.gamma.data()[ch];
            let be = self.beta.data()[ch];
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for s in 0..plane {
                    let xh = (x[base + s] - mean) * inv_std;
                    x_hat[base + s] = xh;
                    out[base + s] = g * xh + be;
                }
            }
        }

        self.cache = Some(BnCache {
            x_hat: Tensor::new(input.shape(), x_hat)?,
            inv_std: inv_std_all,
            train: mode == Mode::Train,
        });
        Tensor::new(input.shape(), out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| no_cache("batchnorm"))?;
        if upstream.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm backward: upstream {:?} vs cached {:?}",
                upstream.shape(),
                cache.x_hat.shape()
            )));
        }
        let shape = cache.x_hat.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let n = (b * plane) as f64;
        let dy = upstream.data();
        let xh = cache.x_hat.data();
        let mut dx = vec![0.0; dy.len()];

        for ch in 0..c {
            let g = self.gamma.data()[ch];
            let inv_std = cache.inv_std[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                for s in 0..plane {
                    sum_dy += dy[base + s];
                    sum_dy_xh += dy[base + s] * xh[base + s];
                }
            }
            self.grad_gamma.data_mut()[ch] += sum_dy_xh;
            self.grad_beta.data_mut()[ch] += sum_dy;

            if cache.train {
                let scale = g * inv_std / n;
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for s in 0..plane {
                        dx[base + s] =
                            scale * (n * dy[base + s] - sum_dy - xh[base + s] * sum_dy_xh);
                    }
                }
            } else {
                let scale = g * inv_std;
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for s in 0..plane {
                        dx[base + s] = scale * dy[base + s];
                    }
                }
            }
        }
        Tensor::new(&shape, dx)
    }

    pub fn params(&self) -> Vec<(&Tensor, &Tensor)> {
        vec![(&self.gamma, &self.grad_gamma), (&self.beta, &self.grad_beta)]
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        vec![(&mut self.gamma, &mut self.grad_gamma), (&mut self.beta, &mut self.grad_beta)]
    }
}

/// 2x2 max pooling with stride 2; spatial extents must be even.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    cache: Option<(Vec<usize>, Vec<usize>)>, // input shape, argmax flat indices
}

impl MaxPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn out_shape(in_shape: &[usize]) -> Result<Vec<usize>> {
        if in_shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!("maxpool expects [B,C,H,W], got {in_shape:?}")));
        }
        let (h, w) = (in_shape[2], in_shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("maxpool 2x2 needs even extents, got {h}x{w}")));
        }
        Ok(vec![in_shape[0], in_shape[1], h / 2, w / 2])
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out_shape = Self::out_shape(input.shape())?;
        let (b, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = input.data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                    let mut best = x[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + oy * wo + ox] = best;
                    argmax[out_base + oy * wo + ox] = best_idx;
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((input.shape().to_vec(), argmax));
        }
        Tensor::new(&out_shape, out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (in_shape, argmax) = self.cache.take().ok_or_else(|| no_cache("maxpool"))?;
        if upstream.len() != argmax.len() {
            return Err(Error::ShapeMismatch(format!(
                "maxpool backward: upstream {:?} does not match cached output",
                upstream.shape()
            )));
        }
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (g, &idx) in upstream.data().iter().zip(&argmax) {
            dx[idx] += g;
        }
        Tensor::new(&in_shape, dx)
    }
}

/// Fully connected layer: `y = x W^T + b` on `[B, in] -> [B, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    weights: Tensor, // [out, in]
    bias: Tensor,    // [out]
    grad_weights: Tensor,
    grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("dense weights must be [out,in], got {:?}", weights.shape())));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::ShapeMismatch(format!(
                "dense bias {:?} does not match out features {}",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        let grad_weights = weights.zeros_like();
        let grad_bias = bias.zeros_like();
        Ok(Self { weights, bias, grad_weights, grad_bias, cached_input: None })
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if input.shape().len() != 2 || input.shape()[1] != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "dense expects [B,{}], got {:?}",
                self.in_features(),
                input.shape()
            )));
        }
        let (b, n_in, n_out) = (input.shape()[0], self.in_features(), self.out_features());
        let x = input.data();
        let w = self.weights.data();
        let mut out = vec![0.0; b * n_out];
        for bi in 0..b {
            let row = &x[bi * n_in..(bi + 1) * n_in];
            for o in 0..n_out {
                let wrow = &w[o * n_in..(o + 1) * n_in];
                let mut acc = self.bias.data()[o];
                for i in 0..n_in {
                    acc += row[i] * wrow[i];
                }
                out[bi * n_out + o] = acc;
            }
        }
        if mode == Mode::Train {
            self.cached_input = Some(input.clone());
        }
        Tensor::new(&[b, n_out], out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cached_input.take().ok_or_else(|| no_cache("dense"))?;
        let (b, n_in, n_out) = (input.shape()[0], self.in_features(), self.out_features());
        if upstream.shape() != [b, n_out] {
            return Err(Error::ShapeMismatch(format!(
                "dense backward: upstream {:?} vs [{b}, {n_out}]",
                upstream.shape()
            )));
        }
        let x = input.data();
        let g = upstream.data();
        let w = self.weights.data();
        let gw = self.grad_weights.data_mut();
        let gb = self.grad_bias.data_mut();
        let mut dx = vec![0.0; b * n_in];
        for bi in 0..b {
            for o in 0..n_out {
                let gv = g[bi * n_out + o];
                gb[o] += gv;
                let wrow = &w[o * n_in..(o + 1) * n_in];
                let gwrow = &mut gw[o * n_in..(o + 1) * n_in];
                let xrow = &x[bi * n_in..(bi + 1) * n_in];
                let dxrow = &mut dx[bi * n_in..(bi + 1) * n_in];
                for i in 0..n_in {
                    gwrow[i] += gv * xrow[i];
                    dxrow[i] += gv * wrow[i];
                }
            }
        }
        Tensor::new(&[b, n_in], dx)
    }

    pub fn params(&self) -> Vec<(&Tensor, &Tensor)> {
        vec![(&self.weights, &self.grad_weights), (&self.bias, &self.grad_bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        vec![(&mut self.weights, &mut self.grad_weights), (&mut self.bias, &mut self.grad_bias)]
    }
}

/// Row-wise softmax over `[B, N]`.
#[derive(Debug, Clone, Default)]
pub struct Softmax {
    cached_output: Option<Tensor>,
}

impl Softmax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if input.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("softmax expects [B,N], got {:?}", input.shape())));
        }
        let (b, n) = (input.shape()[0], input.shape()[1]);
        let mut out = vec![0.0; b * n];
        for bi in 0..b {
            let row = &input.data()[bi * n..(bi + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for i in 0..n {
                let e = (row[i] - max).exp();
                out[bi * n + i] = e;
                sum += e;
            }
            for i in 0..n {
                out[bi * n + i] /= sum;
            }
        }
        let out = Tensor::new(input.shape(), out)?;
        if mode == Mode::Train {
            self.cached_output = Some(out.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let s = self.cached_output.take().ok_or_else(|| no_cache("softmax"))?;
        if upstream.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "softmax backward: upstream {:?} vs cached {:?}",
                upstream.shape(),
                s.shape()
            )));
        }
        let (b, n) = (s.shape()[0], s.shape()[1]);
        let mut dx = vec![0.0; b * n];
        for bi in 0..b {
            let srow = &s.data()[bi * n..(bi + 1) * n];
            let grow = &upstream.data()[bi * n..(bi + 1) * n];
            let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
            for i in 0..n {
                dx[bi * n + i] = srow[i] * (grow[i] - dot);
            }
        }
        Tensor::new(s.shape(), dx)
    }
}

/// Reshapes `[B, ...]` to `[B, prod(...)]`, remembering the original shape.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cached_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if input.shape().len() < 2 {
            return Err(Error::ShapeMismatch(format!("flatten expects a batch axis, got {:?}", input.shape())));
        }
        let b = input.shape()[0];
        let rest: usize = input.shape()[1..].iter().product();
        if mode == Mode::Train {
            self.cached_shape = Some(input.shape().to_vec());
        }
        input.reshape(&[b, rest])
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.cached_shape.take().ok_or_else(|| no_cache("flatten"))?;
        upstream.reshape(&shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{central_difference, gradient_rel_err};
    use crate::tensor::Rng;

    fn fd_check_input<L>(layer_ctor: impl Fn() -> L, forward: impl Fn(&mut L, &Tensor) -> Tensor, backward: impl Fn(&mut L, &Tensor) -> Tensor, shape: &[usize], seed: u64, tol: f64) {
        let mut rng = Rng::new(seed);
        let input = Tensor::fill_uniform(shape, -1.0, 1.0, &mut rng).unwrap();
        let mut l = layer_ctor();
        let out = forward(&mut l, &input);
        let proj = Tensor::fill_uniform(out.shape(), -1.0, 1.0, &mut rng).unwrap();
        let analytic = backward(&mut l, &proj);
        let numeric = central_difference(
            |x| {
                let mut l = layer_ctor();
                let out = forward(&mut l, &Tensor::new(shape, x.to_vec()).unwrap());
                out.frobenius_inner(&proj).unwrap()
            },
            input.data(),
            1e-5,
        );
        let err = gradient_rel_err(analytic.data(), &numeric);
        assert!(err < tol, "input gradient rel err {err}");
    }

    #[test]
    fn relu_identity_and_gradient() {
        let mut relu = ReLU::new();
        let x = Tensor::new(&[1, 4], vec![-1.0, 0.0, 2.0, 3.5]).unwrap();
        let y = relu.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 3.5]);
        let g = relu.backward(&Tensor::full(&[1, 4], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(relu.backward(&x).is_err()); // cache consumed

        fd_check_input(
            ReLU::new,
            |l, x| l.forward(x, Mode::Train).unwrap(),
            |l, g| l.backward(g).unwrap(),
            &[2, 3, 4, 4],
            11,
            1e-5,
        );
    }

    #[test]
    fn maxpool_forward_and_gradient() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        let mut pool = MaxPool::new();
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = pool.backward(&Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0, 0.0]);

        assert!(MaxPool::out_shape(&[1, 1, 3, 4]).is_err());

        fd_check_input(
            MaxPool::new,
            |l, x| l.forward(x, Mode::Train).unwrap(),
            |l, g| l.backward(g).unwrap(),
            &[2, 2, 4, 4],
            13,
            1e-5,
        );
    }

    #[test]
    fn dense_forward_and_gradients() {
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(&[2], vec![0.1, -0.1]).unwrap();
        let mut dense = Dense::new(w, b).unwrap();
        let x = Tensor::new(&[1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let y = dense.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[2.0 - 6.0 + 0.1, 6.0 - 0.1]);

        let mut rng = Rng::new(21);
        let x = Tensor::fill_uniform(&[3, 4], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::fill_uniform(&[2, 4], -1.0, 1.0, &mut rng).unwrap();
        let bias = Tensor::fill_uniform(&[2], -0.5, 0.5, &mut rng).unwrap();
        let proj = Tensor::fill_uniform(&[3, 2], -1.0, 1.0, &mut rng).unwrap();

        let mut dense = Dense::new(w.clone(), bias.clone()).unwrap();
        dense.forward(&x, Mode::Train).unwrap();
        let dx = dense.backward(&proj).unwrap();

        let num_x = central_difference(
            |v| {
                let mut l = Dense::new(w.clone(), bias.clone()).unwrap();
                l.forward(&Tensor::new(&[3, 4], v.to_vec()).unwrap(), Mode::Train)
                    .unwrap()
                    .frobenius_inner(&proj)
                    .unwrap()
            },
            x.data(),
            1e-5,
        );
        assert!(gradient_rel_err(dx.data(), &num_x) < 1e-6);

        let num_w = central_difference(
            |v| {
                let mut l = Dense::new(Tensor::new(&[2, 4], v.to_vec()).unwrap(), bias.clone()).unwrap();
                l.forward(&x, Mode::Train).unwrap().frobenius_inner(&proj).unwrap()
            },
            w.data(),
            1e-5,
        );
        assert!(gradient_rel_err(dense.params()[0].1.data(), &num_w) < 1e-6);
    }

    #[test]
    fn softmax_rows_are_probabilities() {
        let mut rng = Rng::new(3);
        let x = Tensor::fill_uniform(&[5, 7], -4.0, 4.0, &mut rng).unwrap();
        let mut sm = Softmax::new();
        let y = sm.forward(&x, Mode::Eval).unwrap();
        for bi in 0..5 {
            let row = &y.data()[bi * 7..(bi + 1) * 7];
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }

        fd_check_input(
            Softmax::new,
            |l, x| l.forward(x, Mode::Train).unwrap(),
            |l, g| l.backward(g).unwrap(),
            &[3, 5],
            17,
            1e-5,
        );
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_is_deterministic_affine() {
        let mut rng = Rng::new(29);
        let x = Tensor::fill_uniform(&[4, 2, 3, 3], -2.0, 2.0, &mut rng).unwrap();
        let mut bn = BatchNorm::new(2).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        // per-channel output stats: mean 0, var 1 (gamma=1, beta=0)
        for ch in 0..2 {
            let mut vals = Vec::new();
            for bi in 0..4 {
                for s in 0..9 {
                    vals.push(y.data()[(bi * 2 + ch) * 9 + s]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // eps shifts it slightly
        }

        let mut bn_eval = bn.clone();
        bn_eval.cache = None;
        let a = bn_eval.forward(&x, Mode::Eval).unwrap();
        let b = bn_eval.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        fd_check_input(
            || BatchNorm::new(2).unwrap(),
            |l, x| l.forward(x, Mode::Train).unwrap(),
            |l, g| l.backward(g).unwrap(),
            &[3, 2, 2, 2],
            37,
            1e-5,
        );

        // gamma/beta gradients
        let mut rng = Rng::new(41);
        let x = Tensor::fill_uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        let proj = Tensor::fill_uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        let mut bn = BatchNorm::new(2).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        bn.backward(&proj).unwrap();
        let analytic_gamma = bn.params()[0].1.data().to_vec();
        let num_gamma = central_difference(
            |v| {
                let mut l = BatchNorm::new(2).unwrap();
                l.gamma = Tensor::new(&[2], v.to_vec()).unwrap();
                l.forward(&x, Mode::Train).unwrap().frobenius_inner(&proj).unwrap()
            },
            &[1.0, 1.0],
            1e-5,
        );
        assert!(gradient_rel_err(&analytic_gamma, &num_gamma) < 1e-6);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = Rng::new(2);
        let x = Tensor::fill_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let mut fl = Flatten::new();
        let y = fl.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 48]);
        let back = fl.backward(&y).unwrap();
        assert_eq!(back, x);
    }
}
