//! `PQT1` packed model format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      4 bytes  "PQT1"
//! version    u16      1
//! flags      u8       bit 0: activation calibration present
//! input      3 x u16  channels, height, width of one sample
//! arch_len   u8       number of architecture records that follow
//! per record: kind u8, then u16 parameters
//!   0 conv     out_channels, kernel, stride, padding
//!   1 linear   out_features
//!   2 relu
//!   3 maxpool  size
//!   4 flatten
//! layers     u32      number of trainable layers
//! per layer:
//!   scheme     u8     0 float, 1 uniform, 2 pot, 3 apot
//!   bits       u8     nominal bits including sign (32 for float)
//!   fsr_exp    i8     PoT exponent bound, 0 otherwise
//!   field      u8     bits per packed weight
//!   ndim       u8     followed by ndim u32 dims
//!   scale      f32    layer scale factor SF (0 for float layers)
//!   act_max    f32    calibrated input max-abs (0 when uncalibrated)
//!   bias_len   u32    followed by bias_len f32
//!   payload    u32    byte length, followed by the payload
//! ```
//!
//! Quantized payloads store one `field`-bit value per weight, least
//! significant bit first, padded to a whole byte per layer. Within a field
//! the top bit is the sign (1 = negative) and the rest is the magnitude code:
//!
//! * uniform: code = integer magnitude; a zeroed weight is the all-zero
//!   field;
//! * APoT: 4-bit code `first | second << 2` (5-bit field); zero is the
//!   all-ones code `0b1111` with sign 0;
//! * PoT: exponent code `c` (level `2^(fsr_exp - c)`). Every code is a real
//!   level, so a layer with zeroed weights gets one extra code bit and
//!   reserves the all-ones code with sign 0 for zero. Layers without zeros
//!   use exactly `bits` per weight.
//!
//! Float layers store raw `f32` values.

use super::{ActQuantParams, LayerWeights, QuantModel};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model, ModelSpec};
use crate::quantizers::{QuantScheme, QuantizedLayer, Sign, APOT_ZERO_CODE};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PQT1";
pub const FORMAT_VERSION: u16 = 1;

/// Bits per packed weight of a quantized layer.
pub fn field_bits(q: &QuantizedLayer) -> u8 {
    match q.scheme() {
        QuantScheme::Uniform { bits } => bits,
        QuantScheme::Pot { bits, .. } if q.zero_count() > 0 => bits + 1,
        QuantScheme::Pot { bits, .. } => bits,
        QuantScheme::Apot { .. } => 5,
        QuantScheme::Float => 32,
    }
}

fn reserved_zero(field: u8) -> u32 {
    // All-ones code, sign bit clear.
    (1u32 << (field - 1)) - 1
}

/// Packs the signs and codes of `q` densely, LSB first.
pub fn encode_layer(q: &QuantizedLayer) -> Vec<u8> {
    let field = field_bits(q);
    let pot_zero = matches!(q.scheme(), QuantScheme::Pot { .. }) && q.zero_count() > 0;
    let mut out = vec![0u8; (q.len() * field as usize).div_ceil(8)];
    for i in 0..q.len() {
        let v = if q.zero_mask()[i] && pot_zero {
            reserved_zero(field)
        } else {
            q.codes()[i] as u32 | (q.signs()[i].is_negative() as u32) << (field - 1)
        };
        let pos = i * field as usize;
        for j in 0..field as usize {
            if v >> j & 1 == 1 {
                out[(pos + j) / 8] |= 1 << ((pos + j) % 8);
            }
        }
    }
    out
}

/// Inverse of [`encode_layer`].
pub fn decode_layer(
    bytes: &[u8],
    shape: Vec<usize>,
    scheme: QuantScheme,
    scale: f32,
    field: u8,
) -> Result<QuantizedLayer> {
    let n: usize = shape.iter().product();
    let bits = scheme.bits();
    let pot_zero = match scheme {
        QuantScheme::Pot { .. } if field == bits + 1 => true,
        QuantScheme::Pot { .. } | QuantScheme::Uniform { .. } if field == bits => false,
        QuantScheme::Apot { .. } if field == 5 => false,
        _ => return Err(Error::Format(format!("field width {field} invalid for {}", scheme.label()))),
    };
    if bytes.len() != (n * field as usize).div_ceil(8) {
        return Err(Error::Format(format!(
            "payload of {} bytes does not hold {n} weights of {field} bits",
            bytes.len()
        )));
    }
    let code_mask = (1u32 << (field - 1)) - 1;
    let (mut signs, mut codes, mut mask) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let pos = i * field as usize;
        let mut v = 0u32;
        for j in 0..field as usize {
            v |= ((bytes[(pos + j) / 8] >> ((pos + j) % 8)) as u32 & 1) << j;
        }
        let neg = v >> (field - 1) & 1 == 1;
        let code = (v & code_mask) as u8;
        let zero = match scheme {
            QuantScheme::Pot { .. } => pot_zero && v == reserved_zero(field),
            QuantScheme::Uniform { .. } => code == 0,
            _ => code == APOT_ZERO_CODE,
        };
        if zero {
            if neg {
                return Err(Error::Format(format!("weight {i}: zero code with negative sign")));
            }
            signs.push(Sign::Pos);
            codes.push(if matches!(scheme, QuantScheme::Apot { .. }) { APOT_ZERO_CODE } else { 0 });
        } else {
            signs.push(if neg { Sign::Neg } else { Sign::Pos });
            codes.push(code);
        }
        mask.push(zero);
    }
    QuantizedLayer::from_parts(shape, scheme, scale, signs, codes, mask).map_err(|e| Error::Format(e.to_string()))
}

/// Encoder/decoder for whole models.
pub struct PackedModel;

fn scheme_tag(s: QuantScheme) -> (u8, u8, i8) {
    match s {
        QuantScheme::Float => (0, 32, 0),
        QuantScheme::Uniform { bits } => (1, bits, 0),
        QuantScheme::Pot { bits, fsr_exp } => (2, bits, fsr_exp as i8),
        QuantScheme::Apot { bits, .. } => (3, bits, 0),
    }
}

fn put_u16(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Input(format!("architecture value {v} exceeds 65535")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_spec(spec: &ModelSpec, out: &mut Vec<u8>) -> Result<()> {
    for &d in &spec.input {
        put_u16(out, d)?;
    }
    let n = u8::try_from(spec.layers.len()).map_err(|_| Error::Input("more than 255 architecture layers".into()))?;
    out.push(n);
    for l in &spec.layers {
        match *l {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push(0);
                for v in [out_channels, kernel, stride, padding] {
                    put_u16(out, v)?;
                }
            }
            LayerSpec::Linear { out_features } => {
                out.push(1);
                put_u16(out, out_features)?;
            }
            LayerSpec::Relu => out.push(2),
            LayerSpec::MaxPool { size } => {
                out.push(3);
                put_u16(out, size)?;
            }
            LayerSpec::Flatten => out.push(4),
        }
    }
    Ok(())
}

fn decode_spec(r: &mut Reader) -> Result<ModelSpec> {
    let input = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    let n = r.u8()?;
    let mut layers = Vec::with_capacity(n as usize);
    for _ in 0..n {
        layers.push(match r.u8()? {
            0 => LayerSpec::Conv {
                out_channels: r.u16()? as usize,
                kernel: r.u16()? as usize,
                stride: r.u16()? as usize,
                padding: r.u16()? as usize,
            },
            1 => LayerSpec::Linear {
                out_features: r.u16()? as usize,
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::MaxPool { size: r.u16()? as usize },
            4 => LayerSpec::Flatten,
            k => return Err(Error::Format(format!("unknown architecture record {k}"))),
        });
    }
    Ok(ModelSpec { input, layers })
}

impl PackedModel {
    pub fn encode(model: &QuantModel) -> Result<Vec<u8>> {
        let fm = model.float_model();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(model.calibration.is_some() as u8);
        encode_spec(&fm.spec(), &mut out)?;
        out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
        for (k, (layer, bias)) in model.layers.iter().zip(fm.biases()).enumerate() {
            let scheme = layer.scheme();
            if let QuantScheme::Pot { fsr_exp, .. } = scheme {
                if i8::try_from(fsr_exp).is_err() {
                    return Err(Error::Input(format!("fsr_exp {fsr_exp} does not fit the format")));
                }
            }
            let (tag, bits, fsr) = scheme_tag(scheme);
            let (field, scale, payload) = match layer {
                LayerWeights::Float(t) => (32, 0.0f32, t.data().iter().flat_map(|v| v.to_le_bytes()).collect()),
                LayerWeights::Quantized(q) => (field_bits(q), q.scale(), encode_layer(q)),
            };
            out.extend_from_slice(&[tag, bits, fsr as u8, field]);
            let shape = layer.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&scale.to_le_bytes());
            let act_max = model.calibration.as_ref().map_or(0.0, |c| c.act_max[k]);
            out.extend_from_slice(&act_max.to_le_bytes());
            out.extend_from_slice(&(bias.numel() as u32).to_le_bytes());
            for v in bias.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<QuantModel> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PQT1 file".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let calibrated = r.u8()? & 1 == 1;
        let spec = decode_spec(&mut r)?;
        let mut model = Model::init(&spec, 0).map_err(|e| Error::Format(format!("architecture: {e}")))?;
        let n_layers = r.u32()? as usize;
        if n_layers != model.layer_names().len() {
            return Err(Error::Format(format!(
                "{n_layers} layer records for an architecture with {} trainable layers",
                model.layer_names().len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut act_max = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let [tag, bits, fsr, field] = r.array()?;
            let scheme = match tag {
                0 => QuantScheme::Float,
                1 => QuantScheme::Uniform { bits },
                2 => QuantScheme::Pot {
                    bits,
                    fsr_exp: fsr as i8 as i32,
                },
                3 => QuantScheme::Apot { bits, terms: 2 },
                t => return Err(Error::Format(format!("unknown scheme tag {t}"))),
            };
            scheme.validate().map_err(|e| Error::Format(e.to_string()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let scale = r.f32()?;
            act_max.push(r.f32()?);
            let bias_len = r.u32()? as usize;
            let bias = (0..bias_len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            biases.push(Tensor::new(vec![bias_len], bias).map_err(|e| Error::Format(e.to_string()))?);
            let payload_len = r.u32()? as usize;
            let payload = r.take(payload_len)?;
            layers.push(match scheme {
                QuantScheme::Float => {
                    if field != 32 || payload_len != shape.iter().product::<usize>() * 4 {
                        return Err(Error::Format("float layer payload size mismatch".into()));
                    }
                    let data = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                        .collect();
                    LayerWeights::Float(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?)
                }
                s => LayerWeights::Quantized(decode_layer(payload, shape, s, scale, field)?),
            });
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        for ((_, b), nb) in model.params_mut().into_iter().zip(biases) {
            if b.shape() != nb.shape() {
                return Err(Error::Format(format!("bias shape {:?} vs {:?}", nb.shape(), b.shape())));
            }
            *b = nb;
        }
        let mut qm = QuantModel::new(model, layers).map_err(|e| Error::Format(e.to_string()))?;
        if calibrated {
            if act_max.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
                return Err(Error::Format("calibrated activation range must be positive".into()));
            }
            qm.calibration = Some(ActQuantParams { act_max });
        }
        Ok(qm)
    }

    pub fn write(model: &QuantModel, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, Self::encode(model)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<QuantModel> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}
