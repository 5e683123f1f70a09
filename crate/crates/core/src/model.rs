//! Sequential CNN/MLP description, initialisation and forward pass.

use crate::error::{Error, Result};
use crate::tensor::{ops, ConvGeom, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[channels, height, width]` of one sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// conv3x3(16)-relu-conv3x3(32)-relu-maxpool2-fc(classes) for 8x8
    /// single-channel images.
    pub fn desk(classes: usize) -> Self {
        Self {
            input: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    out_features: classes,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Linear {
        name: String,
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl Layer {
    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Linear { .. })
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d { name, .. } | Layer::Linear { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

/// Shape of one sample as it flows through the network.
#[derive(Debug, Clone, Copy)]
enum Flow {
    Image(usize, usize, usize),
    Flat(usize),
}

impl Model {
    /// Builds a model with Kaiming-uniform weights and zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        let mut flow = Flow::Image(c, h, w);
        let (mut n_conv, mut n_fc) = (0, 0);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let layer = match (*l, flow) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Flow::Image(c, h, w),
                ) => {
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::Config("conv layers need positive sizes".into()));
                    }
                    let (oh, ow) = ConvGeom { stride, padding }.output_size(h, w, kernel, kernel)?;
                    flow = Flow::Image(out_channels, oh, ow);
                    n_conv += 1;
                    let fan_in = c * kernel * kernel;
                    Layer::Conv2d {
                        name: format!("conv{n_conv}"),
                        weight: Tensor::kaiming_uniform(&[out_channels, c, kernel, kernel], fan_in, &mut rng),
                        bias: Tensor::zeros(&[out_channels]),
                        stride,
                        padding,
                    }
                }
                (LayerSpec::Linear { out_features }, Flow::Flat(inp)) => {
                    if out_features == 0 {
                        return Err(Error::Config("linear layers need positive sizes".into()));
                    }
                    flow = Flow::Flat(out_features);
                    n_fc += 1;
                    Layer::Linear {
                        name: format!("fc{n_fc}"),
                        weight: Tensor::kaiming_uniform(&[out_features, inp], inp, &mut rng),
                        bias: Tensor::zeros(&[out_features]),
                    }
                }
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::MaxPool { size }, Flow::Image(c, h, w)) => {
                    if size == 0 || size > h || size > w {
                        return Err(Error::Config(format!("pool size {size} does not fit {h}x{w}")));
                    }
                    flow = Flow::Image(c, h / size, w / size);
                    Layer::MaxPool { size }
                }
                (LayerSpec::Flatten, Flow::Image(c, h, w)) => {
                    flow = Flow::Flat(c * h * w);
                    Layer::Flatten
                }
                (LayerSpec::Flatten, Flow::Flat(_)) => Layer::Flatten,
                (spec, flow) => {
                    return Err(Error::Config(format!(
                        "layer {spec:?} cannot follow a {flow:?} activation"
                    )))
                }
            };
            layers.push(layer);
        }
        if !matches!(flow, Flow::Flat(_)) {
            return Err(Error::Config("model must end in a linear layer".into()));
        }
        Ok(Self {
            input_shape: spec.input,
            layers,
        })
    }

    /// Architecture description that rebuilds this model's layer list.
    pub fn spec(&self) -> ModelSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d {
                    weight,
                    stride,
                    padding,
                    ..
                } => LayerSpec::Conv {
                    out_channels: weight.shape()[0],
                    kernel: weight.shape()[2],
                    stride: *stride,
                    padding: *padding,
                },
                Layer::Linear { weight, .. } => LayerSpec::Linear {
                    out_features: weight.shape()[0],
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::MaxPool { size } => LayerSpec::MaxPool { size: *size },
                Layer::Flatten => LayerSpec::Flatten,
            })
            .collect();
        ModelSpec {
            input: self.input_shape,
            layers,
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.is_trainable())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.trainable().filter_map(|l| l.name().map(str::to_owned)).collect()
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
                _ => None,
            })
            .collect()
    }

    pub fn biases(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d { bias, .. } | Layer::Linear { bias, .. } => Some(bias),
                _ => None,
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => {
                    Some((weight, bias))
                }
                _ => None,
            })
            .collect()
    }

    /// Replaces every trainable weight tensor, keeping shapes.
    pub fn set_weights(&mut self, weights: Vec<Tensor>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "model has {} weight tensors, got {}",
                params.len(),
                weights.len()
            )));
        }
        for ((w, _), new) in params.iter_mut().zip(weights) {
            if w.shape() != new.shape() {
                return Err(Error::Dimension(format!(
                    "weight shape {:?} vs {:?}",
                    w.shape(),
                    new.shape()
                )));
            }
            **w = new;
        }
        Ok(())
    }

    pub fn num_weights(&self) -> usize {
        self.weights().iter().map(|w| w.numel()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Dimension(format!(
                "expected input [N, {:?}], got {s:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`, reading the trainable parameters
    /// from `weights`/`biases` (one entry per trainable layer, in order).
    pub fn forward(&self, tape: &mut Tape, x: Var, weights: &[Var], biases: &[Var]) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        let mut k = 0;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let geom = ConvGeom {
                        stride: *stride,
                        padding: *padding,
                    };
                    let y = tape.conv2d(h, weights[k], Some(biases[k]), geom)?;
                    k += 1;
                    y
                }
                Layer::Linear { .. } => {
                    let y = tape.linear(h, weights[k], Some(biases[k]))?;
                    k += 1;
                    y
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool { size } => tape.max_pool2d(h, *size)?,
                Layer::Flatten => {
                    let s = tape.value(h).shape();
                    let n = s[0];
                    let rest = s[1..].iter().product::<usize>();
                    tape.reshape(h, &[n, rest])?
                }
            };
        }
        Ok(h)
    }

    /// Forward pass without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                    ..
                } => ops::conv2d(
                    &h,
                    weight,
                    Some(bias),
                    ConvGeom {
                        stride: *stride,
                        padding: *padding,
                    },
                )?,
                Layer::Linear { weight, bias, .. } => ops::linear(&h, weight, Some(bias))?,
                Layer::Relu => ops::relu(&h),
                Layer::MaxPool { size } => ops::max_pool2d(&h, *size)?.0,
                Layer::Flatten => {
                    let n = h.shape()[0];
                    let rest = h.numel() / n;
                    h.reshape(&[n, rest])?
                }
            };
        }
        Ok(h)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
