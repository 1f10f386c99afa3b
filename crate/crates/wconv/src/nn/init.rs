//! Kaiming weight initialization.

use crate::conv::KernelTensor;
use crate::error::Result;
use crate::tensor::{Rng, Tensor};

/// Re-draws the kernel weights as `Normal(0, sqrt(2 / fan_in))` with
/// `fan_in = C_in * K^2` and zeroes the biases. The density plays no role
/// here, so standard and weighted layers built from the same seed start from
/// identical weights.
pub fn kaiming_init(kernels: &KernelTensor, rng: &mut Rng) -> Result<KernelTensor> {
    let fan_in = (kernels.in_channels() * kernels.k() * kernels.k()) as f64;
    let std = (2.0 / fan_in).sqrt();
    KernelTensor::new(
        Tensor::fill_normal(kernels.weights().shape(), 0.0, std, rng)?,
        Tensor::zeros(&[kernels.filters()])?,
    )
}

/// Kaiming-initialized dense weights `[out, in]` with `fan_in = in`.
pub fn kaiming_dense(out_features: usize, in_features: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let std = (2.0 / in_features as f64).sqrt();
    Ok((
        Tensor::fill_normal(&[out_features, in_features], 0.0, std, rng)?,
        Tensor::zeros(&[out_features])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_two_gives_unit_std() {
        // 1x1 kernel over 2 channels: fan_in = 2, std = 1.
        let base = KernelTensor::zeros(1, 2, 1).unwrap();
        let k = kaiming_init(&base, &mut Rng::new(0)).unwrap();
        assert_eq!(k.weights().shape(), &[1, 2, 1, 1]);
        assert!(k.bias().data().iter().all(|&b| b == 0.0));
        // statistical confirmation over many draws at the same fan_in
        let wide = KernelTensor::zeros(50_000, 2, 1).unwrap();
        let k = kaiming_init(&wide, &mut Rng::new(4)).unwrap();
        let data = k.weights().data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (data.len() - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn empirical_std_tracks_fan_in() {
        // fan_in = 16 * 9 = 144
        let base = KernelTensor::zeros(700, 16, 3).unwrap();
        let k = kaiming_init(&base, &mut Rng::new(8)).unwrap();
        let data = k.weights().data();
        assert!(data.len() >= 100_000);
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (data.len() - 1) as f64;
        let target = (2.0 / 144.0f64).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn same_seed_same_weights() {
        let base = KernelTensor::zeros(4, 3, 3).unwrap();
        let a = kaiming_init(&base, &mut Rng::new(99)).unwrap();
        let b = kaiming_init(&base, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }
}
