use serde::{Deserialize, Serialize};

use crate::error::{PackError, Result};

/// One backbone layer. Convolutions and fully connected layers carry the
/// prunable weights; the remaining kinds are parameter-free except batch norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        has_bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        has_bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
    },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output units (filters or neurons) of a prunable layer.
    pub fn units(&self) -> Option<usize> {
        match *self {
            LayerSpec::Linear { out_features, .. } => Some(out_features),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Linear { has_bias, .. } | LayerSpec::Conv2d { has_bias, .. } => has_bias,
            LayerSpec::BatchNorm { .. } => true,
            _ => false,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_features, .. } => in_features,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                if input != [in_features] {
                    return Err(PackError::dim(format!(
                        "linear layer expects [{in_features}] input, got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if kernel == 0 || stride == 0 {
                    return Err(PackError::dim("conv2d kernel and stride must be >= 1"));
                }
                if input.len() != 3 || input[0] != in_channels {
                    return Err(PackError::dim(format!(
                        "conv2d expects [{in_channels}, H, W] input, got {input:?}"
                    )));
                }
                let oh = conv_out(input[1], kernel, stride, padding)?;
                let ow = conv_out(input[2], kernel, stride, padding)?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::BatchNorm { channels } => {
                if channels == 0 || input.first() != Some(&channels) {
                    return Err(PackError::dim(format!(
                        "batchnorm over {channels} channels got input {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                if input.len() != 3 || !input[1].is_multiple_of(2) || !input[2].is_multiple_of(2) {
                    return Err(PackError::dim(format!(
                        "maxpool2x2 needs even spatial extents, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = size + 2 * pad;
    if span < kernel || !(span - kernel).is_multiple_of(stride) {
        return Err(PackError::dim(format!(
            "conv output size ({size}+2*{pad}-{kernel})/{stride}+1 is not a positive integer"
        )));
    }
    Ok((span - kernel) / stride + 1)
}
