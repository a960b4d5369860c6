use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::ConvSpec;

/// One element of a sequential network.
///
/// In JSON a layer is an object tagged by `kind`, e.g.
/// `{"kind":"conv","in_channels":3,"out_channels":16,"kernel_h":3,"kernel_w":3,"stride":1}`
/// or `{"kind":"dropout","rate":0.25}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv(ConvSpec),
    #[serde(alias = "max_pool")]
    MaxPool,
    #[serde(alias = "avg_pool")]
    AvgPool,
    Relu,
    Elu,
    Dropout {
        rate: f64,
    },
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            LayerSpec::Conv(c) => c.validate().map_err(|e| e.to_string()),
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                Err(format!("dropout rate must lie in [0, 1), got {rate}"))
            }
            LayerSpec::Linear { inputs, outputs } if *inputs == 0 || *outputs == 0 => {
                Err("linear extents must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let spatial = |what: &str| -> Result<(usize, usize, usize), String> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(format!(
                    "{what} expects a (channels, height, width) input, got {input:?}"
                )),
            }
        };
        match self {
            LayerSpec::Conv(spec) => {
                let (c, h, w) = spatial("conv")?;
                if c != spec.in_channels {
                    return Err(format!(
                        "expects {} input channels, previous layer yields {c}",
                        spec.in_channels
                    ));
                }
                let (oh, ow) = spec.output_hw(h, w).map_err(|e| e.to_string())?;
                Ok(vec![spec.out_channels, oh, ow])
            }
            LayerSpec::MaxPool | LayerSpec::AvgPool => {
                let (c, h, w) = spatial("pooling")?;
                if h < 2 || w < 2 {
                    return Err(format!("pooling needs at least 2×2 input, got {h}×{w}"));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Relu | LayerSpec::Elu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear { inputs, outputs } => match input {
                [f] if f == inputs => Ok(vec![*outputs]),
                [f] => Err(format!(
                    "expects {inputs} features, previous layer yields {f}"
                )),
                _ => Err(format!(
                    "expects a flat input, got {input:?} (missing flatten?)"
                )),
            },
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv(c) => vec![c.weight_shape().to_vec(), vec![c.out_channels]],
            LayerSpec::Linear { inputs, outputs } => vec![vec![*inputs, *outputs], vec![*outputs]],
            _ => vec![],
        }
    }

    pub fn fan_in(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv(c) => Some(c.in_channels * c.kernel_h * c.kernel_w),
            LayerSpec::Linear { inputs, .. } => Some(*inputs),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Elu => "elu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }
}

/// Compact token used in weight-file record names, e.g. `conv(3,16,3x3,s1)`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv(c) => write!(
                f,
                "conv({},{},{}x{},s{})",
                c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride
            ),
            LayerSpec::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerSpec::Linear { inputs, outputs } => write!(f, "linear({inputs},{outputs})"),
            other => f.write_str(other.kind()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, args) = match s.split_once('(') {
            Some((k, rest)) => (
                k,
                rest.strip_suffix(')')
                    .ok_or_else(|| format!("unterminated layer token `{s}`"))?,
            ),
            None => (s, ""),
        };
        let parts: Vec<&str> = if args.is_empty() {
            vec![]
        } else {
            args.split(',').collect()
        };
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| format!("bad integer `{v}` in `{s}`"))
        };
        let spec = match (kind, parts.as_slice()) {
            ("conv", [cin, cout, k, stride]) => {
                let (kh, kw) = k
                    .split_once('x')
                    .ok_or_else(|| format!("bad kernel in `{s}`"))?;
                let stride = stride
                    .strip_prefix('s')
                    .ok_or_else(|| format!("bad stride in `{s}`"))?;
                LayerSpec::Conv(ConvSpec {
                    in_channels: int(cin)?,
                    out_channels: int(cout)?,
                    kernel_h: int(kh)?,
                    kernel_w: int(kw)?,
                    stride: int(stride)?,
                })
            }
            ("linear", [i, o]) => LayerSpec::Linear {
                inputs: int(i)?,
                outputs: int(o)?,
            },
            ("dropout", [r]) => LayerSpec::Dropout {
                rate: r.parse().map_err(|_| format!("bad rate in `{s}`"))?,
            },
            ("maxpool", []) => LayerSpec::MaxPool,
            ("avgpool", []) => LayerSpec::AvgPool,
            ("relu", []) => LayerSpec::Relu,
            ("elu", []) => LayerSpec::Elu,
            ("flatten", []) => LayerSpec::Flatten,
            _ => return Err(format!("unknown layer token `{s}`")),
        };
        Ok(spec)
    }
}

/// Custom architecture file: either a bare JSON list of layers or an object
/// with an explicit input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelFile {
    Full {
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
    },
    Layers(Vec<LayerSpec>),
}

impl ModelFile {
    pub fn into_parts(self, default_input: [usize; 3]) -> ([usize; 3], Vec<LayerSpec>) {
        match self {
            ModelFile::Full {
                input_shape,
                layers,
            } => (input_shape, layers),
            ModelFile::Layers(layers) => (default_input, layers),
        }
    }
}
