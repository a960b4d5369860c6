//! Sequential networks, the LaksNet/PilotNet builders, the regression loss,
//! Adam and the binary weights format.

mod adam;
mod builders;
mod format;
mod loss;
mod spec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{self, DropoutMask, Mode, Scalar, Tensor, TensorError};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use builders::{
    build_custom, build_laksnet, build_laksnet_with, build_pilotnet, build_pilotnet_with,
    laksnet_specs, pilotnet_specs, DropoutRates, LAKSNET_INPUT, LAKSNET_PARAMETERS,
    PILOTNET_PARAMETERS, PILOTNET_PARAMETERS_REPORTED,
};
pub use format::{
    decode_checkpoint, decode_weights, encode_checkpoint, encode_weights, load_weights,
    save_weights, FORMAT_VERSION, MAGIC,
};
pub use loss::{mse_loss, EvalReport};
pub use spec::{LayerSpec, ModelFile};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error{}: {message}", .layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Config {
        layer: Option<usize>,
        message: String,
    },
    #[error("non-finite gradient in {layer}")]
    NonFinite { layer: String },
    #[error("corrupt weights file: {0}")]
    Corrupt(String),
    #[error("incompatible weights: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn config_error(layer: Option<usize>, message: impl Into<String>) -> NnError {
    NnError::Config {
        layer,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    /// `[weight, bias]` for conv/linear layers, empty otherwise.
    pub params: Vec<Tensor<T>>,
}

/// An ordered chain of layers on a fixed `(channels, height, width)` input.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
}

/// Per-layer parameter gradients, aligned with [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

enum Cache<T> {
    Input(Tensor<T>),
    Shape(Vec<usize>),
    MaxPool(tensor::ArgmaxMap),
    Dropout(DropoutMask),
}

/// Output of a forward pass together with everything backward needs.
pub struct ForwardPass<T = f32> {
    pub output: Tensor<T>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Network<T> {
    /// Validates the layer chain and allocates zeroed parameters.
    pub fn from_specs(specs: Vec<LayerSpec>, input_shape: [usize; 3]) -> Result<Self> {
        if specs.is_empty() {
            return Err(config_error(None, "layer list is empty"));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            spec.validate()
                .map_err(|m| config_error(Some(i), format!("{spec}: {m}")))?;
            shape = spec
                .output_shape(&shape)
                .map_err(|m| config_error(Some(i), format!("{spec}: {m}")))?;
            let params = spec
                .param_shapes()
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect();
            layers.push(Layer { spec, params });
        }
        if shape != [1] {
            return Err(config_error(
                Some(layers.len() - 1),
                format!("network must end in a single output, got shape {shape:?}"),
            ));
        }
        Ok(Self {
            input_shape,
            layers,
        })
    }

    /// Fan-in scaled Gaussian weights (std = sqrt(2 / fan_in)), zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let Some(fan_in) = layer.spec.fan_in() else {
                continue;
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in layer.params[0].data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
            layer.params[1].data_mut().fill(T::zero());
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn count_parameters(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(Tensor::len)
            .sum()
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.to_vec();
        self.layers
            .iter()
            .map(|l| {
                shape = l.spec.output_shape(&shape).expect("validated at build");
                shape.clone()
            })
            .collect()
    }

    pub fn layer_name(&self, index: usize) -> String {
        format!("layer{index}:{}", self.layers[index].spec)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    params: l.params.iter().map(Tensor::cast).collect(),
                })
                .collect(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(TensorError::Rank {
                op: "forward",
                expected: 4,
                found: s.len(),
            }
            .into());
        }
        for (axis, (&e, &f)) in ["channels", "height", "width"]
            .into_iter()
            .zip(self.input_shape.iter().zip(&s[1..]))
        {
            tensor::expect_extent("forward", axis, e, f)?;
        }
        Ok(())
    }

    /// Forward pass keeping the caches needed by [`Network::backward`].
    /// `rng` drives dropout in train mode and is untouched in eval mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = apply(layer, x, mode, rng)?;
            caches.push(cache);
            x = y;
        }
        Ok(ForwardPass { output: x, caches })
    }

    /// ReLU signs and max-pool winners of a pass. Two passes with equal
    /// patterns lie on the same linear piece of every kink, so a finite
    /// difference between them measures the derivative.
    pub fn kink_pattern(&self, pass: &ForwardPass<T>) -> Vec<u8> {
        let mut out = Vec::new();
        for (layer, cache) in self.layers.iter().zip(&pass.caches) {
            match (layer.spec, cache) {
                (LayerSpec::Relu, Cache::Input(x)) => {
                    out.extend(x.data().iter().map(|&v| (v > T::zero()) as u8))
                }
                (LayerSpec::MaxPool, Cache::MaxPool(arg)) => out.extend_from_slice(arg.offsets()),
                _ => {}
            }
        }
        out
    }

    /// Eval-mode predictions `[N, 1]` without retaining caches.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = apply_eval(layer, x)?;
        }
        Ok(x)
    }

    /// Backpropagates `grad_output` (shaped like the forward output) through
    /// the cached pass.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        if grad_output.shape() != pass.output.shape() {
            return Err(TensorError::Dimension {
                op: "backward",
                axis: "output",
                expected: pass.output.len(),
                found: grad_output.len(),
            }
            .into());
        }
        let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_output.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            let (gin, pgrads) = backprop(layer, cache, &g, i > 0)?;
            grads[i] = pgrads;
            g = gin;
        }
        Ok(Gradients { layers: grads })
    }
}

fn apply<T: Scalar, R: Rng + ?Sized>(
    layer: &Layer<T>,
    x: Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Cache<T>)> {
    Ok(match layer.spec {
        LayerSpec::Conv(spec) => {
            let y = tensor::conv2d_forward(&x, &layer.params[0], &layer.params[1], &spec)?;
            (y, Cache::Input(x))
        }
        LayerSpec::Linear { .. } => {
            let y = tensor::linear_forward(&x, &layer.params[0], &layer.params[1])?;
            (y, Cache::Input(x))
        }
        LayerSpec::Relu => (tensor::relu_forward(&x), Cache::Input(x)),
        LayerSpec::Elu => (tensor::elu_forward(&x), Cache::Input(x)),
        LayerSpec::MaxPool => {
            let (y, arg) = tensor::maxpool2x2_forward(&x)?;
            (y, Cache::MaxPool(arg))
        }
        LayerSpec::AvgPool => {
            let y = tensor::avgpool2x2_forward(&x)?;
            (y, Cache::Shape(x.shape().to_vec()))
        }
        LayerSpec::Dropout { rate } => {
            let (y, mask) = tensor::dropout(&x, rate, mode, rng)?;
            (y, Cache::Dropout(mask))
        }
        LayerSpec::Flatten => {
            let shape = x.shape().to_vec();
            let n = shape[0];
            let y = x.reshape(&[n, shape[1..].iter().product()])?;
            (y, Cache::Shape(shape))
        }
    })
}

fn apply_eval<T: Scalar>(layer: &Layer<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    Ok(match layer.spec {
        LayerSpec::Conv(spec) => {
            tensor::conv2d_forward(&x, &layer.params[0], &layer.params[1], &spec)?
        }
        LayerSpec::Linear { .. } => tensor::linear_forward(&x, &layer.params[0], &layer.params[1])?,
        LayerSpec::Relu => tensor::relu_forward(&x),
        LayerSpec::Elu => tensor::elu_forward(&x),
        LayerSpec::MaxPool => tensor::maxpool2x2_forward(&x)?.0,
        LayerSpec::AvgPool => tensor::avgpool2x2_forward(&x)?,
        LayerSpec::Dropout { .. } => x,
        LayerSpec::Flatten => {
            let n = x.shape()[0];
            let f = x.len() / n.max(1);
            x.reshape(&[n, f])?
        }
    })
}

fn backprop<T: Scalar>(
    layer: &Layer<T>,
    cache: &Cache<T>,
    g: &Tensor<T>,
    need_input: bool,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    Ok(match (&layer.spec, cache) {
        (LayerSpec::Conv(spec), Cache::Input(x)) => {
            let grads = tensor::conv2d_backward_impl(g, x, &layer.params[0], spec, need_input)?;
            (grads.input, vec![grads.weights, grads.bias])
        }
        (LayerSpec::Linear { .. }, Cache::Input(x)) => {
            let grads = tensor::linear_backward(g, x, &layer.params[0])?;
            (grads.input, vec![grads.weights, grads.bias])
        }
        (LayerSpec::Relu, Cache::Input(x)) => (tensor::relu_backward(g, x)?, vec![]),
        (LayerSpec::Elu, Cache::Input(x)) => (tensor::elu_backward(g, x)?, vec![]),
        (LayerSpec::MaxPool, Cache::MaxPool(arg)) => (
            tensor::maxpool2x2_backward(g, arg, arg.input_shape())?,
            vec![],
        ),
        (LayerSpec::AvgPool, Cache::Shape(s)) => (tensor::avgpool2x2_backward(g, s)?, vec![]),
        (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
            (tensor::dropout_backward(g, mask)?, vec![])
        }
        (LayerSpec::Flatten, Cache::Shape(s)) => (g.clone().reshape(s)?, vec![]),
        _ => unreachable!("cache variant always matches its layer"),
    })
}
