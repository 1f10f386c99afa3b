//! Model composition: layers, losses, initialization, recipes, checkpoints.

pub mod init;
pub mod layers;
pub mod loss;
pub mod recipes;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{ConvGeometry, KernelTensor};
use crate::density::build_density;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use init::{kaiming_dense, kaiming_init};
pub use layers::{BatchNorm, ConvLayer, Dense, Flatten, MaxPool, Mode, ReLU, Softmax};
pub use loss::{cross_entropy_label_smoothing, mse_loss, Loss};
pub use recipes::{build_mini_dncnn, build_mini_vgg, ConvVariant};

/// What the model predicts; decides loss wiring and report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Denoising,
}

/// One layer of a [`Model`].
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BatchNorm),
    ReLU(ReLU),
    MaxPool(MaxPool),
    Dense(Dense),
    Softmax(Softmax),
    Flatten(Flatten),
}

impl Layer {
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(input, mode),
            Layer::BatchNorm(l) => l.forward(input, mode),
            Layer::ReLU(l) => l.forward(input, mode),
            Layer::MaxPool(l) => l.forward(input, mode),
            Layer::Dense(l) => l.forward(input, mode),
            Layer::Softmax(l) => l.forward(input, mode),
            Layer::Flatten(l) => l.forward(input, mode),
        }
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(upstream),
            Layer::BatchNorm(l) => l.backward(upstream),
            Layer::ReLU(l) => l.backward(upstream),
            Layer::MaxPool(l) => l.backward(upstream),
            Layer::Dense(l) => l.backward(upstream),
            Layer::Softmax(l) => l.backward(upstream),
            Layer::Flatten(l) => l.backward(upstream),
        }
    }

    /// `(parameter, gradient slot)` pairs; empty for stateless layers.
    pub fn params(&self) -> Vec<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv(l) => l.params(),
            Layer::BatchNorm(l) => l.params(),
            Layer::Dense(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Dense(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::ReLU(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Dense(_) => "dense",
            Layer::Softmax(_) => "softmax",
            Layer::Flatten(_) => "flatten",
        }
    }

    /// Output shape for a given input shape, without running data through.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(l) => l.out_shape(in_shape),
            Layer::MaxPool(_) => MaxPool::out_shape(in_shape),
            Layer::Dense(l) => {
                if in_shape.len() != 2 || in_shape[1] != l.in_features() {
                    return Err(Error::ShapeMismatch(format!(
                        "dense expects [B,{}], got {in_shape:?}",
                        l.in_features()
                    )));
                }
                Ok(vec![in_shape[0], l.out_features()])
            }
            Layer::Flatten(_) => {
                if in_shape.len() < 2 {
                    return Err(Error::ShapeMismatch(format!("flatten expects a batch axis, got {in_shape:?}")));
                }
                Ok(vec![in_shape[0], in_shape[1..].iter().product()])
            }
            Layer::BatchNorm(l) => {
                if in_shape.len() != 4 || in_shape[1] != l.channels() {
                    return Err(Error::ShapeMismatch(format!(
                        "batchnorm expects [B,{},H,W], got {in_shape:?}",
                        l.channels()
                    )));
                }
                Ok(in_shape.to_vec())
            }
            Layer::ReLU(_) | Layer::Softmax(_) => Ok(in_shape.to_vec()),
        }
    }
}

/// An ordered pipeline of layers, optionally wrapped in a residual skip
/// (`output = input - body(input)`, the body predicting the corruption).
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    task: TaskKind,
    residual_skip: bool,
    cached_input: Option<Tensor>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, task: TaskKind, residual_skip: bool) -> Self {
        Self { layers, task, residual_skip, cached_input: None }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        if self.residual_skip {
            x = batch.sub(&x)?;
        }
        if mode == Mode::Train {
            self.cached_input = Some(batch.clone());
        }
        Ok(x)
    }

    /// Backpropagates the loss gradient, accumulating parameter gradients,
    /// and returns the gradient with respect to the model input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| Error::InvalidArgument("model: backward called before forward".into()))?;
        let mut g = if self.residual_skip { upstream.scale(-1.0) } else { upstream.clone() };
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        if self.residual_skip {
            if g.shape() != input.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "residual skip: body input grad {:?} vs input {:?}",
                    g.shape(),
                    input.shape()
                )));
            }
            g = upstream.add(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<(&Tensor, &Tensor)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, grad) in self.params_mut() {
            grad.data_mut().fill(0.0);
        }
    }

    /// Count of trainable parameters.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(p, _)| p.len()).sum()
    }

    /// Shape of every intermediate activation for the given input shape,
    /// starting with the input and ending with the model output.
    pub fn trace_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input_shape.to_vec()];
        let mut cur = input_shape.to_vec();
        for layer in &self.layers {
            cur = layer.out_shape(&cur)?;
            shapes.push(cur.clone());
        }
        if self.residual_skip && cur != input_shape {
            return Err(Error::ShapeMismatch(format!(
                "residual skip needs body output {cur:?} to match input {input_shape:?}"
            )));
        }
        Ok(shapes)
    }

    /// Writes a checkpoint: a `model.toml` manifest describing layer kinds
    /// and configs, plus one tensor file per parameter (and per batch-norm
    /// running statistic).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Manifest {
            format: 1,
            task: match self.task {
                TaskKind::Classification => "classification".into(),
                TaskKind::Denoising => "denoising".into(),
            },
            residual: self.residual_skip,
            layers: Vec::new(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            manifest.layers.push(layer_manifest(layer));
            for (j, (p, _)) in layer.params().iter().enumerate() {
                p.save(&dir.join(format!("layer{i}_p{j}.wct")))?;
            }
            if let Layer::BatchNorm(bn) = layer {
                bn.running_mean.save(&dir.join(format!("layer{i}_s0.wct")))?;
                bn.running_var.save(&dir.join(format!("layer{i}_s1.wct")))?;
            }
        }
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("model.toml"), text)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.toml"))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
        if manifest.format != 1 {
            return Err(Error::Format(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let task = match manifest.task.as_str() {
            "classification" => TaskKind::Classification,
            "denoising" => TaskKind::Denoising,
            other => return Err(Error::Format(format!("unknown task kind {other:?}"))),
        };
        let mut layers = Vec::new();
        for (i, lm) in manifest.layers.iter().enumerate() {
            let p = |j: usize| Tensor::load(&dir.join(format!("layer{i}_p{j}.wct")));
            let layer = match lm.kind.as_str() {
                "conv" => {
                    let kernels = KernelTensor::new(p(0)?, p(1)?)?;
                    let density = match (&lm.density_central, &lm.density_coeffs) {
                        (Some(cv), Some(coeffs)) => Some(build_density(kernels.k(), *cv, coeffs)?),
                        (None, None) => None,
                        _ => return Err(Error::Format(format!("layer {i}: incomplete density spec"))),
                    };
                    let geom = ConvGeometry::new(
                        lm.padding.ok_or_else(|| Error::Format(format!("layer {i}: missing padding")))?,
                        lm.stride.ok_or_else(|| Error::Format(format!("layer {i}: missing stride")))?,
                    )?;
                    Layer::Conv(ConvLayer::new(kernels, density, geom)?)
                }
                "batchnorm" => {
                    let mut bn = BatchNorm::new(
                        lm.channels.ok_or_else(|| Error::Format(format!("layer {i}: missing channels")))?,
                    )?;
                    let mut slots = bn.params_mut();
                    *slots[0].0 = p(0)?;
                    *slots[1].0 = p(1)?;
                    bn.running_mean = Tensor::load(&dir.join(format!("layer{i}_s0.wct")))?;
                    bn.running_var = Tensor::load(&dir.join(format!("layer{i}_s1.wct")))?;
                    Layer::BatchNorm(bn)
                }
                "relu" => Layer::ReLU(ReLU::new()),
                "maxpool" => Layer::MaxPool(MaxPool::new()),
                "dense" => Layer::Dense(Dense::new(p(0)?, p(1)?)?),
                "softmax" => Layer::Softmax(Softmax::new()),
                "flatten" => Layer::Flatten(Flatten::new()),
                other => return Err(Error::Format(format!("unknown layer kind {other:?}"))),
            };
            layers.push(layer);
        }
        Ok(Model::new(layers, task, manifest.residual))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    task: String,
    residual: bool,
    layers: Vec<LayerManifest>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct LayerManifest {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    density_central: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    density_coeffs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
}

fn layer_manifest(layer: &Layer) -> LayerManifest {
    let mut lm = LayerManifest { kind: layer.kind_name().into(), ..Default::default() };
    match layer {
        Layer::Conv(conv) => {
            lm.padding = Some(conv.geom.padding);
            lm.stride = Some(conv.geom.stride);
            if let Some(d) = conv.density() {
                lm.density_central = Some(d.central_value());
                lm.density_coeffs = Some(d.free_coeffs().to_vec());
            }
        }
        Layer::BatchNorm(bn) => {
            lm.channels = Some(bn.channels());
        }
        _ => {}
    }
    lm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{build_density, uniform_density};
    use crate::reference::{central_difference, gradient_rel_err};
    use crate::tensor::Rng;

    fn small_conv_model(weighted: bool, rng: &mut Rng) -> Model {
        let d = build_density(3, 1.0, &[0.8]).unwrap();
        let density = if weighted { Some(d) } else { None };
        let k1 = kaiming_init(&KernelTensor::zeros(2, 1, 3).unwrap(), rng).unwrap();
        let k2 = kaiming_init(&KernelTensor::zeros(1, 2, 3).unwrap(), rng).unwrap();
        Model::new(
            vec![
                Layer::Conv(ConvLayer::new(k1, density.clone(), ConvGeometry::same(3)).unwrap()),
                Layer::ReLU(ReLU::new()),
                Layer::Conv(ConvLayer::new(k2, density, ConvGeometry::same(3)).unwrap()),
            ],
            TaskKind::Denoising,
            false,
        )
    }

    #[test]
    fn empty_model_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::fill_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let mut m = Model::new(Vec::new(), TaskKind::Denoising, false);
        assert_eq!(m.forward(&x, Mode::Train).unwrap(), x);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut rng = Rng::new(2);
        let mut m = small_conv_model(false, &mut rng);
        let g = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(m.backward(&g).is_err());
    }

    #[test]
    fn two_layer_conv_model_gradient_check() {
        for weighted in [false, true] {
            let mut rng = Rng::new(5);
            let mut m = small_conv_model(weighted, &mut rng);
            let x = Tensor::fill_uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng).unwrap();
            let proj = Tensor::fill_uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng).unwrap();

            m.zero_grads();
            m.forward(&x, Mode::Train).unwrap();
            m.backward(&proj).unwrap();
            let analytic: Vec<Vec<f64>> = m.params().iter().map(|(_, g)| g.data().to_vec()).collect();

            for (pi, a) in analytic.iter().enumerate() {
                let orig = m.params()[pi].0.data().to_vec();
                let shape = m.params()[pi].0.shape().to_vec();
                let numeric = central_difference(
                    |v| {
                        *m.params_mut()[pi].0 = Tensor::new(&shape, v.to_vec()).unwrap();
                        let out = m.forward(&x, Mode::Train).unwrap();
                        out.frobenius_inner(&proj).unwrap()
                    },
                    &orig,
                    1e-5,
                );
                *m.params_mut()[pi].0 = Tensor::new(&shape, orig).unwrap();
                let err = gradient_rel_err(a, &numeric);
                assert!(err < 1e-5, "param {pi} rel err {err} (weighted={weighted})");
            }
        }
    }

    #[test]
    fn swapping_standard_and_uniform_weighted_is_exact() {
        let mut rng_a = Rng::new(9);
        let mut rng_b = Rng::new(9);
        let mut std_model = small_conv_model(false, &mut rng_a);
        let mut uni_model = small_conv_model(false, &mut rng_b);
        for layer in uni_model.layers_mut() {
            if let Layer::Conv(c) = layer {
                c.set_density(Some(uniform_density(3).unwrap())).unwrap();
            }
        }
        let x = Tensor::fill_uniform(&[2, 1, 6, 6], -1.0, 1.0, &mut rng_a).unwrap();
        let a = std_model.forward(&x, Mode::Train).unwrap();
        let b = uni_model.forward(&x, Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_parameter_has_same_shaped_grad_slot() {
        let mut rng = Rng::new(12);
        let d = build_density(3, 1.0, &[0.9]).unwrap();
        let m = build_mini_vgg(10, 4, ConvVariant::Weighted, &d, &mut rng).unwrap();
        for (p, g) in m.params() {
            assert_eq!(p.shape(), g.shape());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(33);
        let d = build_density(3, 1.0, &[0.7]).unwrap();
        let mut m = build_mini_dncnn(4, 3, ConvVariant::Weighted, &d, &mut rng).unwrap();
        // run one training forward so batch-norm running stats are nontrivial
        let x = Tensor::fill_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        m.save(dir.path()).unwrap();

        let mut loaded = Model::load(dir.path()).unwrap();
        assert_eq!(loaded.parameter_count(), m.parameter_count());
        let a = m.forward(&x, Mode::Eval).unwrap();
        let b = loaded.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }
}
