//! Quantized model execution, weight packing and size accounting.
//!
//! A [`QuantModel`] holds one [`LayerWeights`] per trainable layer next to a
//! float [`Model`] carrying the dequantized weights. Two inference paths are
//! available:
//!
//! * the float path runs the float model, so it is bit-identical to
//!   evaluating the dequantized weights during training;
//! * the integer path quantizes every layer input to signed integers
//!   (symmetric max-abs calibration), runs each dot product through the MAC
//!   emulator and rescales the accumulator by `act_scale * weight_unit`.

mod pack;
mod report;

pub use pack::{decode_layer, encode_layer, field_bits, PackedModel, FORMAT_VERSION, MAGIC};
pub use report::{memory_traffic_report, model_size_report, SizeReport, TrafficReport};

use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::par;
use crate::quantizers::{
    apot_split, quantize, PruneConfig, QuantScheme, QuantizedLayer, APOT_FIRST_TERM, APOT_SECOND_TERM,
};
use crate::shift_mac::{MacConfig, MacKind, MacStats, MacUnit, OverflowMode, WeightCode};
use crate::tensor::{ops, ConvGeom, Tensor};
use serde::{Deserialize, Serialize};

/// Weights of one trainable layer: either kept in float or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Float(Tensor),
    Quantized(QuantizedLayer),
}

impl LayerWeights {
    pub fn dequantize(&self) -> Tensor {
        match self {
            Self::Float(t) => t.clone(),
            Self::Quantized(q) => q.dequantize(),
        }
    }

    pub fn scheme(&self) -> QuantScheme {
        match self {
            Self::Float(_) => QuantScheme::Float,
            Self::Quantized(q) => q.scheme(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Float(t) => t.shape(),
            Self::Quantized(q) => q.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_count(&self) -> usize {
        match self {
            Self::Float(_) => 0,
            Self::Quantized(q) => q.zero_count(),
        }
    }
}

/// Per-layer activation calibration: the largest input magnitude seen by each
/// trainable layer on the calibration batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActQuantParams {
    pub act_max: Vec<f32>,
}

impl ActQuantParams {
    /// Real value of one integer step for `bits`-bit signed activations.
    pub fn scale(&self, layer: usize, bits: u8) -> f32 {
        self.act_max[layer] / act_qmax(bits) as f32
    }
}

fn act_qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferencePath {
    Float,
    Integer,
}

/// Knobs of the integer path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegerOptions {
    /// Signed activation width including the sign bit.
    pub act_bits: u8,
    /// `(intermediate, accumulator)` widths; `None` uses each kind's nominal
    /// widths.
    pub widths: Option<(u32, u32)>,
    pub overflow: OverflowMode,
}

impl Default for IntegerOptions {
    fn default() -> Self {
        Self {
            act_bits: 8,
            widths: None,
            overflow: OverflowMode::Wrap,
        }
    }
}

impl IntegerOptions {
    fn mac_config(&self, kind: MacKind) -> MacConfig {
        let c = MacConfig::nominal(kind).with_overflow(self.overflow);
        match self.widths {
            Some((i, a)) => c.with_widths(i, a),
            None => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// MAC statistics per trainable layer (all zero for float layers).
    pub layer_stats: Vec<MacStats>,
}

impl ForwardOutput {
    pub fn stats(&self) -> MacStats {
        let mut total = MacStats::default();
        for s in &self.layer_stats {
            total += *s;
        }
        total
    }
}

/// MAC datapath that executes a quantization scheme.
pub fn mac_kind_for(scheme: QuantScheme) -> Result<MacKind> {
    match scheme {
        QuantScheme::Pot { bits, .. } if bits <= 4 => Ok(MacKind::Pot4x8),
        QuantScheme::Uniform { bits } if bits <= 4 => Ok(MacKind::Uniform4x8),
        QuantScheme::Uniform { .. } => Ok(MacKind::Uniform8x8),
        QuantScheme::Apot { .. } => Ok(MacKind::Apot4x8),
        s => Err(Error::Input(format!("no integer MAC datapath for scheme {}", s.label()))),
    }
}

/// Integer operands of a quantized layer. `None` marks a zeroed weight,
/// which is skipped before it reaches the MAC.
#[derive(Debug, Clone)]
pub struct IntegerWeights {
    pub kind: MacKind,
    pub codes: Vec<Option<WeightCode>>,
    /// Real value of integer weight 1.
    pub unit: f64,
}

pub fn integer_weights(q: &QuantizedLayer) -> Result<IntegerWeights> {
    let scheme = q.scheme();
    let kind = mac_kind_for(scheme)?;
    let sf = q.scale() as f64;
    let max_code = scheme.max_code();
    let unit = match scheme {
        QuantScheme::Pot { fsr_exp, .. } => sf * 2f64.powi(fsr_exp - max_code as i32),
        QuantScheme::Uniform { .. } => sf / max_code as f64,
        // Largest term 2^0 maps to shift 5, so the codebook scales by 32.
        QuantScheme::Apot { .. } => sf / (32.0 * crate::quantizers::APOT_MAX_SUM),
        QuantScheme::Float => unreachable!("quantized layers never use the float scheme"),
    };
    let codes = (0..q.len())
        .map(|i| {
            if q.zero_mask()[i] {
                return None;
            }
            let (sign, c) = (q.signs()[i], q.codes()[i]);
            Some(match scheme {
                QuantScheme::Pot { .. } => WeightCode::pot(sign, max_code - c),
                QuantScheme::Uniform { .. } => WeightCode::uniform(sign, c),
                _ => {
                    let (a, b) = apot_split(c);
                    WeightCode::apot(
                        sign,
                        APOT_FIRST_TERM[a].map(|e| 5 - e),
                        APOT_SECOND_TERM[b].map(|e| 5 - e),
                    )
                }
            })
        })
        .collect();
    Ok(IntegerWeights { kind, codes, unit })
}

/// A quantized network ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    /// Float model carrying the dequantized weights and the biases.
    model: Model,
    pub layers: Vec<LayerWeights>,
    pub calibration: Option<ActQuantParams>,
}

impl QuantModel {
    /// Pairs `layers` with the architecture and biases of `model`; the
    /// model's weights are replaced by the dequantized layers.
    pub fn new(mut model: Model, layers: Vec<LayerWeights>) -> Result<Self> {
        model.set_weights(layers.iter().map(LayerWeights::dequantize).collect())?;
        Ok(Self {
            model,
            layers,
            calibration: None,
        })
    }

    /// Quantizes every trainable layer of `model` with the matching entry of
    /// `schemes` (float entries keep the layer as is).
    pub fn from_float(model: &Model, schemes: &[QuantScheme], prune: PruneConfig) -> Result<Self> {
        let weights = model.weights();
        if weights.len() != schemes.len() {
            return Err(Error::Dimension(format!(
                "{} schemes for {} trainable layers",
                schemes.len(),
                weights.len()
            )));
        }
        let layers = weights
            .into_iter()
            .zip(schemes)
            .map(|(w, &s)| {
                Ok(match s {
                    QuantScheme::Float => LayerWeights::Float(w.clone()),
                    s => LayerWeights::Quantized(quantize(w, s, prune)?),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(model.clone(), layers)
    }

    /// Float model with the dequantized weights.
    pub fn float_model(&self) -> &Model {
        &self.model
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(LayerWeights::len).sum()
    }

    pub fn zero_fraction(&self) -> f64 {
        let n = self.num_weights();
        if n == 0 {
            return 0.0;
        }
        self.layers.iter().map(LayerWeights::zero_count).sum::<usize>() as f64 / n as f64
    }

    /// Records the max-abs input of every trainable layer on `batch`.
    pub fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        let mut act_max = Vec::with_capacity(self.layers.len());
        let mut h = batch.clone();
        for layer in &self.model.layers {
            if layer.is_trainable() {
                let m = h.max_abs();
                act_max.push(if m > 0.0 { m } else { 1.0 });
            }
            h = float_layer(layer, &h)?;
        }
        self.calibration = Some(ActQuantParams { act_max });
        Ok(())
    }

    /// Max-abs calibration, then widens a layer's activation range wherever
    /// the running sums on `batch` would exceed `fill` times the largest
    /// value of the accumulator of `opts`. Trades activation resolution for
    /// overflow-free accumulation; `fill < 1` leaves margin for inputs
    /// outside the calibration batch. Layers are processed in order so each
    /// one sees the integer-path outputs of the layers before it.
    pub fn calibrate_with_headroom(&mut self, batch: &Tensor, opts: IntegerOptions, fill: f64) -> Result<()> {
        if !(fill > 0.0 && fill <= 1.0) {
            return Err(Error::Input(format!("accumulator fill must lie in (0, 1], got {fill}")));
        }
        self.calibrate(batch)?;
        let mut h = batch.clone();
        let mut k = 0;
        for layer in &self.model.layers {
            if !layer.is_trainable() {
                h = float_layer(layer, &h)?;
                continue;
            }
            h = match &self.layers[k] {
                LayerWeights::Float(_) => float_layer(layer, &h)?,
                LayerWeights::Quantized(q) => {
                    let iw = integer_weights(q)?;
                    let cfg = opts.mac_config(iw.kind);
                    let limit = ((1u64 << (cfg.accumulator_width - 1)) - 1) as f64 * fill;
                    let unbounded = cfg.with_widths(64, 64);
                    let calib = self.calibration.as_mut().expect("calibrated above");
                    // Peak sums scale roughly linearly with 1/act_scale;
                    // rounding can push them back over, so iterate.
                    loop {
                        let act_scale = calib.scale(k, opts.act_bits);
                        let acts = quantize_acts(h.data(), act_scale, opts.act_bits);
                        let (_, stats) = integer_layer(layer, &h, &acts, &iw, unbounded, 1.0)?;
                        if stats.peak_sum as f64 <= limit {
                            break;
                        }
                        calib.act_max[k] *= (stats.peak_sum as f64 / limit) as f32 * 1.01;
                    }
                    let act_scale = calib.scale(k, opts.act_bits);
                    let acts = quantize_acts(h.data(), act_scale, opts.act_bits);
                    let out_scale = act_scale as f64 * ops::batchnorm_fold(1.0, iw.unit as f32) as f64;
                    integer_layer(layer, &h, &acts, &iw, cfg, out_scale)?.0
                }
            };
            k += 1;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, path: InferencePath) -> Result<ForwardOutput> {
        match path {
            InferencePath::Float => Ok(ForwardOutput {
                logits: self.model.logits(x)?,
                layer_stats: vec![MacStats::default(); self.layers.len()],
            }),
            InferencePath::Integer => self.forward_integer(x, IntegerOptions::default()),
        }
    }

    pub fn forward_integer(&self, x: &Tensor, opts: IntegerOptions) -> Result<ForwardOutput> {
        let calib = self
            .calibration
            .as_ref()
            .ok_or_else(|| Error::State("integer path needs calibrated activation scales".into()))?;
        if !(2..=16).contains(&opts.act_bits) {
            return Err(Error::Input(format!("activation width {} outside 2..=16", opts.act_bits)));
        }
        // Validates the input shape once, up front.
        if x.shape().len() != 4 || x.shape()[1..] != self.model.input_shape {
            return Err(Error::Dimension(format!(
                "expected input [N, {:?}], got {:?}",
                self.model.input_shape,
                x.shape()
            )));
        }
        let mut h = x.clone();
        let mut k = 0;
        let mut layer_stats = Vec::with_capacity(self.layers.len());
        for layer in &self.model.layers {
            if !layer.is_trainable() {
                h = float_layer(layer, &h)?;
                continue;
            }
            let (y, stats) = match &self.layers[k] {
                LayerWeights::Float(_) => (float_layer(layer, &h)?, MacStats::default()),
                LayerWeights::Quantized(q) => {
                    let iw = integer_weights(q)?;
                    let act_scale = calib.scale(k, opts.act_bits);
                    let acts = quantize_acts(h.data(), act_scale, opts.act_bits);
                    let out_scale = act_scale as f64 * ops::batchnorm_fold(1.0, iw.unit as f32) as f64;
                    integer_layer(layer, &h, &acts, &iw, opts.mac_config(iw.kind), out_scale)?
                }
            };
            layer_stats.push(stats);
            h = y;
            k += 1;
        }
        Ok(ForwardOutput { logits: h, layer_stats })
    }
}

fn quantize_acts(x: &[f32], scale: f32, bits: u8) -> Vec<i32> {
    let q = act_qmax(bits);
    x.iter()
        .map(|&v| ((v / scale).round() as i32).clamp(-q, q))
        .collect()
}

fn float_layer(layer: &Layer, h: &Tensor) -> Result<Tensor> {
    Ok(match layer {
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
            ..
        } => ops::conv2d(
            h,
            weight,
            Some(bias),
            ConvGeom {
                stride: *stride,
                padding: *padding,
            },
        )?,
        Layer::Linear { weight, bias, .. } => ops::linear(h, weight, Some(bias))?,
        Layer::Relu => ops::relu(h),
        Layer::MaxPool { size } => ops::max_pool2d(h, *size)?.0,
        Layer::Flatten => {
            let n = h.shape()[0];
            h.reshape(&[n, h.numel() / n])?
        }
    })
}

/// Runs a conv or linear layer on integer activations through the MAC
/// emulator, one accumulator per output element.
fn integer_layer(
    layer: &Layer,
    h: &Tensor,
    acts: &[i32],
    iw: &IntegerWeights,
    cfg: MacConfig,
    out_scale: f64,
) -> Result<(Tensor, MacStats)> {
    let n = h.shape()[0];
    match layer {
        Layer::Linear { weight, bias, .. } => {
            let (out, inp) = (weight.shape()[0], weight.shape()[1]);
            if h.shape() != [n, inp] {
                return Err(Error::Dimension(format!("linear input {:?} vs weight {:?}", h.shape(), weight.shape())));
            }
            let rows = par::map_range(n, |s| -> Result<(Vec<f32>, MacStats)> {
                let mut unit = MacUnit::new(cfg);
                let mut stats = MacStats::default();
                let mut y = Vec::with_capacity(out);
                for o in 0..out {
                    unit.reset();
                    for i in 0..inp {
                        if let Some(code) = &iw.codes[o * inp + i] {
                            unit.step(acts[s * inp + i], code)?;
                        }
                    }
                    stats += unit.stats();
                    y.push((unit.value() as f64 * out_scale) as f32 + bias.data()[o]);
                }
                Ok((y, stats))
            });
            collect_rows(rows, vec![n, out])
        }
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
            ..
        } => {
            let ws = weight.shape();
            let (oc, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let s = h.shape();
            if s.len() != 4 || s[1] != c {
                return Err(Error::Dimension(format!("conv input {s:?} vs weight {ws:?}")));
            }
            let (ih, iwd) = (s[2], s[3]);
            let geom = ConvGeom {
                stride: *stride,
                padding: *padding,
            };
            let (oh, ow) = geom.output_size(ih, iwd, kh, kw)?;
            let rows = par::map_range(n, |b| -> Result<(Vec<f32>, MacStats)> {
                let mut unit = MacUnit::new(cfg);
                let mut stats = MacStats::default();
                let mut y = Vec::with_capacity(oc * oh * ow);
                let base = b * c * ih * iwd;
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            unit.reset();
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                        if ix < 0 || ix >= iwd as isize {
                                            continue;
                                        }
                                        let wi = ((o * c + ci) * kh + ky) * kw + kx;
                                        if let Some(code) = &iw.codes[wi] {
                                            let ai = base + (ci * ih + iy as usize) * iwd + ix as usize;
                                            unit.step(acts[ai], code)?;
                                        }
                                    }
                                }
                            }
                            stats += unit.stats();
                            y.push((unit.value() as f64 * out_scale) as f32 + bias.data()[o]);
                        }
                    }
                }
                Ok((y, stats))
            });
            collect_rows(rows, vec![n, oc, oh, ow])
        }
        _ => Err(Error::Input("integer execution needs a conv or linear layer".into())),
    }
}

fn collect_rows(rows: Vec<Result<(Vec<f32>, MacStats)>>, shape: Vec<usize>) -> Result<(Tensor, MacStats)> {
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut stats = MacStats::default();
    for r in rows {
        let (y, s) = r?;
        data.extend(y);
        stats += s;
    }
    Ok((Tensor::new(shape, data)?, stats))
}

/// Top-1 accuracy of `model` on `data` along `path`, plus summed MAC
/// statistics.
pub fn evaluate_path(
    model: &QuantModel,
    data: &crate::data::Dataset,
    path: InferencePath,
    opts: IntegerOptions,
) -> Result<(f64, MacStats)> {
    let mut correct = 0usize;
    let mut stats = MacStats::default();
    for idx in data.batch_indices(256, None) {
        let (x, y) = data.batch(&idx);
        let out = match path {
            InferencePath::Float => model.forward(&x, path)?,
            InferencePath::Integer => model.forward_integer(&x, opts)?,
        };
        stats += out.stats();
        correct += ops::argmax_rows(&out.logits)
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((correct as f64 / data.len() as f64, stats))
}
