//! Quantization-aware training.
//!
//! Two flows are provided:
//!
//! * **STE** keeps a float master copy of every weight. Each step runs the
//!   forward and backward pass on the quantized weights, applies the
//!   gradient to the master copy as if quantization were the identity, and
//!   re-quantizes.
//! * **ALR** keeps no master copy. Forward and backward run on the quantized
//!   weights, which are updated in place with a per-weight learning rate that
//!   grows with the gap between neighbouring PoT levels, then re-quantized.
//!
//! Float pre-training is the STE flow with every layer on the float scheme.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Sgd, SgdConfig};
use crate::qinference::{LayerWeights, QuantModel};
use crate::quantizers::{quantize, PruneConfig, QuantScheme};
use crate::tensor::{ops, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QatMethod {
    Ste,
    Alr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatConfig {
    pub method: QatMethod,
    /// Scheme per trainable layer name (`conv1`, `fc1`, ...).
    pub schemes: BTreeMap<String, QuantScheme>,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "yes")]
    pub quantize_first_layer: bool,
    #[serde(default = "yes")]
    pub quantize_last_layer: bool,
}

fn yes() -> bool {
    true
}

impl QatConfig {
    /// Same scheme on every trainable layer of `model`.
    pub fn uniform_over(model: &Model, method: QatMethod, scheme: QuantScheme) -> Self {
        Self {
            method,
            schemes: model.layer_names().into_iter().map(|n| (n, scheme)).collect(),
            prune: PruneConfig::default(),
            sgd: SgdConfig::default(),
            quantize_first_layer: true,
            quantize_last_layer: true,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        self.sgd.validate()?;
        self.prune.validate()?;
        let names = model.layer_names();
        for n in &names {
            let s = self
                .schemes
                .get(n)
                .ok_or_else(|| Error::Config(format!("no quantization scheme for layer `{n}`")))?;
            s.validate()?;
        }
        if let Some(extra) = self.schemes.keys().find(|k| !names.contains(k)) {
            return Err(Error::Config(format!("scheme given for unknown layer `{extra}`")));
        }
        Ok(())
    }

    /// Scheme actually applied to each trainable layer, honouring the
    /// first/last layer switches.
    pub fn effective_schemes(&self, model: &Model) -> Result<Vec<QuantScheme>> {
        self.validate(model)?;
        let names = model.layer_names();
        let last = names.len() - 1;
        Ok(names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if (i == 0 && !self.quantize_first_layer) || (i == last && !self.quantize_last_layer) {
                    QuantScheme::Float
                } else {
                    self.schemes[n]
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub zero_fraction: f64,
}

/// Learning-rate multiplier for a PoT weight with exponent code `code`: the
/// gap below its level relative to the gap below the smallest level,
/// `2^(max_code - code)`.
pub fn alr_scale(code: u8, bits: u8) -> f32 {
    let max_code = (1u32 << (bits - 1)) - 1;
    debug_assert!((code as u32) <= max_code);
    2f32.powi(max_code as i32 - code as i32)
}

/// Per-weight [`alr_scale`] for a layer; non-PoT layers and zeroed weights
/// use the base rate.
pub fn alr_scales(layer: &LayerWeights) -> Vec<f32> {
    match layer {
        LayerWeights::Quantized(q) => match q.scheme() {
            QuantScheme::Pot { bits, .. } => q
                .codes()
                .iter()
                .zip(q.zero_mask())
                .map(|(&c, &z)| if z { 1.0 } else { alr_scale(c, bits) })
                .collect(),
            _ => vec![1.0; q.len()],
        },
        LayerWeights::Float(t) => vec![1.0; t.numel()],
    }
}

fn quantize_layer(w: &Tensor, scheme: QuantScheme, prune: PruneConfig) -> Result<LayerWeights> {
    Ok(match scheme {
        QuantScheme::Float => LayerWeights::Float(w.clone()),
        s => LayerWeights::Quantized(quantize(w, s, prune)?),
    })
}

/// Training state shared by both flows.
#[derive(Debug, Clone)]
pub struct QatState {
    method: QatMethod,
    schemes: Vec<QuantScheme>,
    prune: PruneConfig,
    sgd: Sgd,
    /// Float master weights (STE only).
    pub master: Option<Vec<Tensor>>,
    /// Live weights used by the forward pass.
    pub weights: Vec<LayerWeights>,
    pub biases: Vec<Tensor>,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl QatState {
    /// Starts from pretrained float weights.
    pub fn new(config: &QatConfig, pretrained: &Model) -> Result<Self> {
        let schemes = config.effective_schemes(pretrained)?;
        let floats: Vec<Tensor> = pretrained.weights().into_iter().cloned().collect();
        let weights = floats
            .iter()
            .zip(&schemes)
            .map(|(w, &s)| quantize_layer(w, s, config.prune))
            .collect::<Result<_>>()?;
        Ok(Self {
            method: config.method,
            schemes,
            prune: config.prune,
            sgd: Sgd::new(config.sgd.clone()),
            master: (config.method == QatMethod::Ste).then_some(floats),
            weights,
            biases: pretrained.biases().into_iter().cloned().collect(),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn method(&self) -> QatMethod {
        self.method
    }

    pub fn schemes(&self) -> &[QuantScheme] {
        &self.schemes
    }

    pub fn sgd_config(&self) -> &SgdConfig {
        self.sgd.config()
    }

    /// Architecture of `arch` carrying the live (dequantized) weights.
    pub fn model(&self, arch: &Model) -> Result<Model> {
        let mut m = arch.clone();
        m.set_weights(self.weights.iter().map(LayerWeights::dequantize).collect())?;
        for ((_, b), nb) in m.params_mut().into_iter().zip(&self.biases) {
            *b = nb.clone();
        }
        Ok(m)
    }

    /// Architecture of `arch` carrying the float master weights (STE only).
    pub fn master_model(&self, arch: &Model) -> Result<Option<Model>> {
        let Some(master) = &self.master else {
            return Ok(None);
        };
        let mut m = self.model(arch)?;
        m.set_weights(master.clone())?;
        Ok(Some(m))
    }

    pub fn quant_model(&self, arch: &Model) -> Result<QuantModel> {
        QuantModel::new(self.model(arch)?, self.weights.clone())
    }

    pub fn zero_fraction(&self) -> f64 {
        let (zeros, total) = self
            .weights
            .iter()
            .filter_map(|w| match w {
                LayerWeights::Quantized(q) => Some((q.zero_count(), q.len())),
                LayerWeights::Float(_) => None,
            })
            .fold((0, 0), |(z, t), (a, b)| (z + a, t + b));
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    /// One SGD step on a batch. Returns the batch loss and the number of
    /// correctly classified samples.
    fn step(&mut self, arch: &Model, x: Tensor, labels: &[usize]) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv: Vec<_> = self
            .weights
            .iter()
            .map(|w| tape.leaf(w.dequantize().with_grad(true)))
            .collect();
        let bv: Vec<_> = self
            .biases
            .iter()
            .map(|b| tape.leaf(b.clone().with_grad(true)))
            .collect();
        let logits = arch.forward(&mut tape, xv, &wv, &bv)?;
        let correct = ops::argmax_rows(tape.value(logits))
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let loss = tape.cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Training {
                epoch: self.epoch,
                loss: loss_value,
            });
        }
        tape.backward(loss)?;

        let n_layers = self.weights.len();
        for i in 0..n_layers {
            let grad = tape.grad(wv[i]).expect("weight leaf requires grad");
            let updated = match self.method {
                QatMethod::Ste => {
                    // Straight-through: the gradient w.r.t. the quantized
                    // weight is applied unchanged to the master weight.
                    let master = &mut self.master.as_mut().expect("STE keeps a master copy")[i];
                    self.sgd.step(i, master.data_mut(), grad, self.epoch);
                    master.clone()
                }
                QatMethod::Alr => {
                    let scales = alr_scales(&self.weights[i]);
                    let mut w = self.weights[i].dequantize();
                    self.sgd
                        .step_scaled(i, w.data_mut(), grad, self.epoch, Some(&scales));
                    w
                }
            };
            self.weights[i] = quantize_layer(&updated, self.schemes[i], self.prune)?;
        }
        for (j, b) in self.biases.iter_mut().enumerate() {
            let grad = tape.grad(bv[j]).expect("bias leaf requires grad");
            self.sgd.step(n_layers + j, b.data_mut(), grad, self.epoch);
        }
        Ok((loss_value, correct))
    }

    fn run_epoch(&mut self, arch: &Model, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
        let cfg = self.sgd.config().clone();
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch as u64);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in train.batch_indices(cfg.batch_size, Some(seed)) {
            let (x, y) = train.batch(&idx);
            let (l, c) = self.step(arch, x, &y)?;
            loss_sum += l * idx.len() as f64;
            correct += c;
        }
        let live = self.model(arch)?;
        let (val_loss, val_accuracy) = loss_and_accuracy(&live, val)?;
        let m = EpochMetrics {
            epoch: self.epoch,
            lr: cfg.lr_at(self.epoch),
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            zero_fraction: self.zero_fraction(),
        };
        self.history.push(m);
        self.epoch += 1;
        Ok(m)
    }

    /// One STE epoch over `train`, evaluated on `val`.
    pub fn ste_epoch(&mut self, arch: &Model, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
        if self.method != QatMethod::Ste || self.master.is_none() {
            return Err(Error::State("STE epoch needs an initialised float master copy".into()));
        }
        self.run_epoch(arch, train, val)
    }

    /// One ALR epoch over `train`, evaluated on `val`.
    pub fn alr_epoch(&mut self, arch: &Model, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
        if self.method != QatMethod::Alr {
            return Err(Error::State("ALR epoch on a state configured for STE".into()));
        }
        self.run_epoch(arch, train, val)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct QatOutcome {
    pub quantized: QuantModel,
    /// Float master weights at the end of STE training.
    pub master: Option<Model>,
    pub history: Vec<EpochMetrics>,
}

/// Runs `config.sgd.epochs` epochs of the configured flow starting from
/// `pretrained`.
pub fn train(config: &QatConfig, pretrained: &Model, train: &Dataset, val: &Dataset) -> Result<QatOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation data must be non-empty".into()));
    }
    let mut state = QatState::new(config, pretrained)?;
    for _ in 0..config.sgd.epochs {
        match config.method {
            QatMethod::Ste => state.ste_epoch(pretrained, train, val)?,
            QatMethod::Alr => state.alr_epoch(pretrained, train, val)?,
        };
    }
    Ok(QatOutcome {
        quantized: state.quant_model(pretrained)?,
        master: state.master_model(pretrained)?,
        history: state.history,
    })
}

/// Plain float training (every layer on the float scheme).
pub fn train_float(model: &Model, sgd: SgdConfig, train: &Dataset, val: &Dataset) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut config = QatConfig::uniform_over(model, QatMethod::Ste, QuantScheme::Float);
    config.sgd = sgd;
    let out = self::train(&config, model, train, val)?;
    Ok((out.master.expect("STE flow keeps a master copy"), out.history))
}

/// One row of a pruning sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pf: f32,
    pub zero_fraction: f64,
    pub accuracy: f64,
}

/// Re-quantizes the float weights of `master` at every pruning factor in
/// `pfs` (no further training) and evaluates each result.
pub fn pruning_sweep(master: &Model, schemes: &[QuantScheme], pfs: &[f32], data: &Dataset) -> Result<Vec<SweepRow>> {
    pfs.iter()
        .map(|&pf| {
            let qm = QuantModel::from_float(master, schemes, PruneConfig::new(pf)?)?;
            Ok(SweepRow {
                pf,
                zero_fraction: qm.zero_fraction(),
                accuracy: evaluate(qm.float_model(), data)?,
            })
        })
        .collect()
}

const EVAL_BATCH: usize = 256;

/// Mean cross-entropy and top-1 accuracy of `model` on `data`.
pub fn loss_and_accuracy(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for idx in data.batch_indices(EVAL_BATCH, None) {
        let (x, y) = data.batch(&idx);
        let logits = model.logits(&x)?;
        loss += ops::cross_entropy(&logits, &y)?.0 as f64 * idx.len() as f64;
        correct += ops::argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for idx in data.batch_indices(EVAL_BATCH, None) {
        let (x, y) = data.batch(&idx);
        let logits = model.logits(&x)?;
        correct += ops::argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
