use super::{LayerSpec, Network, Result};
use crate::tensor::{ConvSpec, Scalar};

/// Network input `(channels, height, width)` for both bundled models.
pub const LAKSNET_INPUT: [usize; 3] = [3, 66, 200];
pub const LAKSNET_PARAMETERS: usize = 274_017;
/// Canonical PilotNet on 3×66×200 with valid convolutions.
pub const PILOTNET_PARAMETERS: usize = 252_219;
/// Total reported for the NVIDIA model in the LaksNet comparison; not
/// reproducible from the published PilotNet layout.
pub const PILOTNET_PARAMETERS_REPORTED: usize = 559_419;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutRates {
    /// After the convolutional stack.
    pub conv: f64,
    /// Between the hidden and the output fully-connected layer.
    pub fc: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            conv: 0.25,
            fc: 0.5,
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec::new(cin, cout, k, stride))
}

/// Four conv+pool blocks (16/32/64 at 3×3, 64 at 5×5), dropout, a 576→256
/// hidden layer, dropout and a single linear output.
pub fn laksnet_specs(rates: DropoutRates) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        conv(3, 16, 3, 1),
        Relu,
        MaxPool,
        conv(16, 32, 3, 1),
        Relu,
        MaxPool,
        conv(32, 64, 3, 1),
        Relu,
        MaxPool,
        conv(64, 64, 5, 1),
        Relu,
        MaxPool,
        Dropout { rate: rates.conv },
        Flatten,
        Linear {
            inputs: 576,
            outputs: 256,
        },
        Relu,
        Dropout { rate: rates.fc },
        Linear {
            inputs: 256,
            outputs: 1,
        },
    ]
}

/// NVIDIA PilotNet: three 5×5 stride-2 and two 3×3 convolutions, dropout
/// after the flatten, then 1152→100→50→10→1.
pub fn pilotnet_specs(dropout: f64) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        conv(3, 24, 5, 2),
        Relu,
        conv(24, 36, 5, 2),
        Relu,
        conv(36, 48, 5, 2),
        Relu,
        conv(48, 64, 3, 1),
        Relu,
        conv(64, 64, 3, 1),
        Relu,
        Flatten,
        Dropout { rate: dropout },
        Linear {
            inputs: 1152,
            outputs: 100,
        },
        Relu,
        Linear {
            inputs: 100,
            outputs: 50,
        },
        Relu,
        Linear {
            inputs: 50,
            outputs: 10,
        },
        Relu,
        Linear {
            inputs: 10,
            outputs: 1,
        },
    ]
}

pub fn build_laksnet<T: Scalar>(seed: u64) -> Network<T> {
    build_laksnet_with(DropoutRates::default(), LAKSNET_INPUT, seed)
        .expect("LaksNet layout is valid on its native input")
}

/// LaksNet on an arbitrary input shape; anything that does not reach the
/// 576-wide flatten is a configuration error.
pub fn build_laksnet_with<T: Scalar>(
    rates: DropoutRates,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<Network<T>> {
    build_custom(laksnet_specs(rates), input_shape, seed)
}

pub fn build_pilotnet<T: Scalar>(seed: u64) -> Network<T> {
    build_pilotnet_with(DropoutRates::default().conv, seed)
}

pub fn build_pilotnet_with<T: Scalar>(dropout: f64, seed: u64) -> Network<T> {
    build_custom(pilotnet_specs(dropout), LAKSNET_INPUT, seed)
        .expect("PilotNet layout is valid on its native input")
}

pub fn build_custom<T: Scalar>(
    specs: Vec<LayerSpec>,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<Network<T>> {
    let mut net = Network::from_specs(specs, input_shape)?;
    net.init_weights(seed);
    Ok(net)
}
