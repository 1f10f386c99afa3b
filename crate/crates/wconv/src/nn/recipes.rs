//! Desk-scale model recipes exercising every layer type: a three-block VGG
//! style classifier for 32x32 RGB images and a reduced-depth DnCNN style
//! residual denoiser.

use crate::conv::{ConvGeometry, KernelTensor};
use crate::density::DensityFunction;
use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::init::{kaiming_dense, kaiming_init};
use super::layers::{BatchNorm, ConvLayer, Dense, Flatten, MaxPool, ReLU};
use super::{Layer, Model, TaskKind};

/// Whether conv layers run the standard operator or carry a density.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvVariant {
    Standard,
    Weighted,
}

fn conv_layer(
    filters: usize,
    in_channels: usize,
    variant: ConvVariant,
    density: &DensityFunction,
    rng: &mut Rng,
) -> Result<Layer> {
    let k = density.k();
    let kernels = kaiming_init(&KernelTensor::zeros(filters, in_channels, k)?, rng)?;
    let attached = match variant {
        ConvVariant::Standard => None,
        ConvVariant::Weighted => Some(density.clone()),
    };
    Ok(Layer::Conv(ConvLayer::new(kernels, attached, ConvGeometry::same(k))?))
}

/// Three conv blocks (conv -> batchnorm -> relu -> maxpool) with doubling
/// width, then a dense head. Fixed 3x32x32 input; kernel extent comes from
/// the density. Standard and weighted variants built from the same seed
/// start from identical weights.
pub fn build_mini_vgg(
    n_classes: usize,
    width: usize,
    variant: ConvVariant,
    density: &DensityFunction,
    rng: &mut Rng,
) -> Result<Model> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
    }
    if width == 0 {
        return Err(Error::InvalidArgument("width must be positive".into()));
    }
    let widths = [width, 2 * width, 4 * width];
    let mut layers = Vec::new();
    let mut in_channels = 3;
    for &w in &widths {
        layers.push(conv_layer(w, in_channels, variant, density, rng)?);
        layers.push(Layer::BatchNorm(BatchNorm::new(w)?));
        layers.push(Layer::ReLU(ReLU::new()));
        layers.push(Layer::MaxPool(MaxPool::new()));
        in_channels = w;
    }
    layers.push(Layer::Flatten(Flatten::new()));
    // 32 -> 16 -> 8 -> 4 after the three pools
    let head_in = widths[2] * 4 * 4;
    let (w, b) = kaiming_dense(n_classes, head_in, rng)?;
    layers.push(Layer::Dense(Dense::new(w, b)?));
    Ok(Model::new(layers, TaskKind::Classification, false))
}

/// Residual denoiser: conv -> relu, (depth - 2) x (conv -> batchnorm ->
/// relu), conv, with the body predicting the noise that is subtracted from
/// the input. Operates on 3-channel images of any geometry the convs accept.
pub fn build_mini_dncnn(
    depth: usize,
    width: usize,
    variant: ConvVariant,
    density: &DensityFunction,
    rng: &mut Rng,
) -> Result<Model> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("dncnn depth must be >= 2, got {depth}")));
    }
    if width == 0 {
        return Err(Error::InvalidArgument("width must be positive".into()));
    }
    let mut layers = Vec::new();
    layers.push(conv_layer(width, 3, variant, density, rng)?);
    layers.push(Layer::ReLU(ReLU::new()));
    for _ in 0..depth - 2 {
        layers.push(conv_layer(width, width, variant, density, rng)?);
        layers.push(Layer::BatchNorm(BatchNorm::new(width)?));
        layers.push(Layer::ReLU(ReLU::new()));
    }
    layers.push(conv_layer(3, width, variant, density, rng)?);
    Ok(Model::new(layers, TaskKind::Denoising, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{build_density, uniform_density};
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn parameter_counts_match_between_variants() {
        let d = build_density(3, 1.0, &[0.8]).unwrap();
        let vgg_std = build_mini_vgg(10, 8, ConvVariant::Standard, &d, &mut Rng::new(1)).unwrap();
        let vgg_wtd = build_mini_vgg(10, 8, ConvVariant::Weighted, &d, &mut Rng::new(1)).unwrap();
        assert_eq!(vgg_std.parameter_count(), vgg_wtd.parameter_count());

        let dn_std = build_mini_dncnn(6, 8, ConvVariant::Standard, &d, &mut Rng::new(2)).unwrap();
        let dn_wtd = build_mini_dncnn(6, 8, ConvVariant::Weighted, &d, &mut Rng::new(2)).unwrap();
        assert_eq!(dn_std.parameter_count(), dn_wtd.parameter_count());
    }

    #[test]
    fn same_seed_gives_identical_initial_weights() {
        let d = build_density(3, 1.0, &[0.8]).unwrap();
        let a = build_mini_vgg(10, 4, ConvVariant::Standard, &d, &mut Rng::new(7)).unwrap();
        let b = build_mini_vgg(10, 4, ConvVariant::Weighted, &d, &mut Rng::new(7)).unwrap();
        for ((pa, _), (pb, _)) in a.params().iter().zip(b.params()) {
            assert_eq!(*pa, pb);
        }
    }

    #[test]
    fn vgg_shape_trace_ends_at_head() {
        let d = uniform_density(3).unwrap();
        let m = build_mini_vgg(10, 16, ConvVariant::Standard, &d, &mut Rng::new(3)).unwrap();
        let shapes = m.trace_shapes(&[5, 3, 32, 32]).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![5, 10]);
        // pool milestones
        assert!(shapes.contains(&vec![5, 16, 16, 16]));
        assert!(shapes.contains(&vec![5, 64, 4, 4]));
    }

    #[test]
    fn dncnn_zero_final_layer_is_identity() {
        let d = uniform_density(3).unwrap();
        let mut m = build_mini_dncnn(4, 6, ConvVariant::Standard, &d, &mut Rng::new(5)).unwrap();
        if let Some(Layer::Conv(c)) = m.layers_mut().last_mut() {
            for (p, _) in c.params_mut() {
                p.data_mut().fill(0.0);
            }
        } else {
            panic!("last layer should be conv");
        }
        let x = Tensor::fill_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut Rng::new(6)).unwrap();
        let y = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn recipes_reject_degenerate_configs() {
        let d = uniform_density(3).unwrap();
        assert!(build_mini_dncnn(1, 4, ConvVariant::Standard, &d, &mut Rng::new(0)).is_err());
        assert!(build_mini_vgg(1, 4, ConvVariant::Standard, &d, &mut Rng::new(0)).is_err());
        assert!(build_mini_vgg(10, 0, ConvVariant::Standard, &d, &mut Rng::new(0)).is_err());
    }
}
