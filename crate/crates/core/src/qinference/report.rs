//! Model size and memory traffic accounting.

use super::pack::{field_bits, PackedModel};
use super::{LayerWeights, QuantModel};
use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeReport {
    pub packed_bytes: usize,
    /// Same file with every quantized layer stored at `baseline_bits`.
    pub baseline_bytes: usize,
    pub baseline_bits: u8,
    pub compression_ratio: f64,
    pub zero_fraction: f64,
}

fn layer_field(layer: &LayerWeights) -> usize {
    match layer {
        LayerWeights::Float(_) => 32,
        LayerWeights::Quantized(q) => field_bits(q) as usize,
    }
}

fn payload_bytes(n: usize, field: usize) -> usize {
    (n * field).div_ceil(8)
}

/// Packed size of `model` against the same model packed at `baseline_bits`
/// per quantized weight (float layers stay float in both).
pub fn model_size_report(model: &QuantModel, baseline_bits: u8) -> Result<SizeReport> {
    if model.num_weights() == 0 {
        return Err(Error::Input("model has no weights; compression ratio undefined".into()));
    }
    if !(1..=32).contains(&baseline_bits) {
        return Err(Error::Input(format!("baseline width {baseline_bits} outside 1..=32")));
    }
    let packed_bytes = PackedModel::encode(model)?.len();
    let (mut ours, mut base) = (0usize, 0usize);
    for l in &model.layers {
        ours += payload_bytes(l.len(), layer_field(l));
        base += match l {
            LayerWeights::Float(_) => payload_bytes(l.len(), 32),
            LayerWeights::Quantized(_) => payload_bytes(l.len(), baseline_bits as usize),
        };
    }
    let baseline_bytes = packed_bytes - ours + base;
    Ok(SizeReport {
        packed_bytes,
        baseline_bytes,
        baseline_bits,
        compression_ratio: packed_bytes as f64 / baseline_bytes as f64,
        zero_fraction: model.zero_fraction(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrafficReport {
    pub word_bits: u32,
    pub words_read: usize,
    pub words_read_8bit: usize,
    pub transactions_vs_8bit_ratio: f64,
}

/// Memory words needed to stream every weight once, with each layer packed
/// into whole `word_bits` words, against an 8-bit packing of the same layers.
pub fn memory_traffic_report(model: &QuantModel, word_bits: u32) -> Result<TrafficReport> {
    if model.num_weights() == 0 {
        return Err(Error::Input("model has no weights".into()));
    }
    if word_bits == 0 {
        return Err(Error::Input("word width must be positive".into()));
    }
    let words = |n: usize, field: usize| (n * field).div_ceil(word_bits as usize);
    let (mut ours, mut base) = (0, 0);
    for l in &model.layers {
        ours += words(l.len(), layer_field(l));
        base += match l {
            LayerWeights::Float(_) => words(l.len(), 32),
            LayerWeights::Quantized(_) => words(l.len(), 8),
        };
    }
    Ok(TrafficReport {
        word_bits,
        words_read: ours,
        words_read_8bit: base,
        transactions_vs_8bit_ratio: ours as f64 / base as f64,
    })
}
