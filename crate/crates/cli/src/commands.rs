use crate::config::{Calibration, ExperimentConfig};
use potq::data::Dataset;
use potq::qat::{self, EpochMetrics};
use potq::qinference::{
    evaluate_path, memory_traffic_report, model_size_report, InferencePath, PackedModel, QuantModel,
};
use potq::quantizers::QuantScheme;
use potq::shift_mac::{cost_table, self_check};
use potq::{Error, Model, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,zero_fraction";
pub const SWEEP_HEADER: &str = "pf,zero_fraction,accuracy";

pub struct Ctx {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn new(config: ExperimentConfig, out_override: Option<PathBuf>) -> Result<Self> {
        let out_dir = out_override.unwrap_or_else(|| config.output_dir.clone());
        std::fs::create_dir_all(&out_dir)?;
        Ok(Self { config, out_dir })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        for (split, loss, acc) in [
            ("train", m.train_loss, m.train_accuracy),
            ("val", m.val_loss, m.val_accuracy),
        ] {
            writeln!(s, "{},{split},{loss:.6},{acc:.6},{},{:.6}", m.epoch, m.lr, m.zero_fraction).unwrap();
        }
    }
    s
}

fn last_val(history: &[EpochMetrics]) -> Option<f64> {
    history.last().map(|m| m.val_accuracy)
}

fn check_classes(model: &Model, data: &Dataset) -> Result<()> {
    let spec = model.spec();
    let outputs = match spec.layers.last() {
        Some(potq::model::LayerSpec::Linear { out_features }) => *out_features,
        _ => return Ok(()),
    };
    if data.num_classes() > outputs {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {outputs} outputs",
            data.num_classes()
        )));
    }
    Ok(())
}

/// Calibrates the integer path as configured in `[mac]`.
fn calibrate(ctx: &Ctx, qm: &mut QuantModel, train: &Dataset) -> Result<()> {
    let mac = &ctx.config.mac;
    let n = mac.calibration_samples.unwrap_or(train.len()).min(train.len());
    let (batch, _) = train.batch(&(0..n).collect::<Vec<_>>());
    match mac.calibration {
        Calibration::MaxAbs => qm.calibrate(&batch),
        Calibration::Headroom => qm.calibrate_with_headroom(&batch, mac.options()?, mac.headroom_fill),
    }
}

pub fn train_float(ctx: &Ctx) -> Result<()> {
    let sgd = ctx.config.train()?.clone();
    let (train, test) = ctx.config.datasets()?;
    let init = Model::init(&ctx.config.model, ctx.config.seed)?;
    check_classes(&init, &train)?;
    let (model, history) = qat::train_float(&init, sgd, &train, &test)?;
    model.save_json(&ctx.out("float.json"))?;
    std::fs::write(ctx.out("float_metrics.csv"), metrics_csv(&history))?;
    let acc = qat::evaluate(&model, &test)?;
    println!("float accuracy: {acc:.4}");
    println!("checkpoint: {}", ctx.out("float.json").display());
    Ok(())
}

pub fn qat(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = ctx.config.qat()?;
    let ckpt = checkpoint.map_or_else(|| ctx.out("float.json"), Path::to_path_buf);
    let pretrained = Model::load_json(&ckpt)?;
    let (train, test) = ctx.config.datasets()?;
    check_classes(&pretrained, &train)?;
    let mut outcome = qat::train(cfg, &pretrained, &train, &test)?;
    std::fs::write(ctx.out("qat_metrics.csv"), metrics_csv(&outcome.history))?;
    if let Some(master) = &outcome.master {
        master.save_json(&ctx.out("qat_master.json"))?;
    }
    calibrate(ctx, &mut outcome.quantized, &train)?;
    PackedModel::write(&outcome.quantized, &ctx.out("qat.pqt"))?;
    let acc = match last_val(&outcome.history) {
        Some(a) => a,
        None => qat::evaluate(outcome.quantized.float_model(), &test)?,
    };
    println!("method: {}", format!("{:?}", cfg.method).to_lowercase());
    println!("quantized accuracy: {acc:.4}");
    println!("zero fraction: {:.4}", outcome.quantized.zero_fraction());
    println!("model: {}", ctx.out("qat.pqt").display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PathChoice {
    Float,
    Integer,
    Both,
}

pub fn eval(ctx: &Ctx, model: &Path, path: PathChoice) -> Result<()> {
    let mut qm = PackedModel::read(model)?;
    let (train, test) = ctx.config.datasets()?;
    let opts = ctx.config.mac.options()?;
    if matches!(path, PathChoice::Float | PathChoice::Both) {
        let (acc, _) = evaluate_path(&qm, &test, InferencePath::Float, opts)?;
        println!("float accuracy: {acc:.4}");
    }
    if matches!(path, PathChoice::Integer | PathChoice::Both) {
        if qm.calibration.is_none() {
            calibrate(ctx, &mut qm, &train)?;
        }
        let (acc, stats) = evaluate_path(&qm, &test, InferencePath::Integer, opts)?;
        println!("integer accuracy: {acc:.4}");
        println!(
            "saturation events: intermediate {}, accumulator {} ({} products, act_bits {})",
            stats.intermediate_events, stats.accumulator_events, stats.products, opts.act_bits
        );
    }
    Ok(())
}

/// Post-training quantization of a float checkpoint with the `[qat]` schemes.
pub fn pack(ctx: &Ctx, checkpoint: &Path, output: Option<&Path>) -> Result<()> {
    let cfg = ctx.config.qat()?;
    let model = Model::load_json(checkpoint)?;
    let mut qm = QuantModel::from_float(&model, &cfg.effective_schemes(&model)?, cfg.prune)?;
    let (train, _) = ctx.config.datasets()?;
    calibrate(ctx, &mut qm, &train)?;
    let out = output.map_or_else(|| ctx.out("model.pqt"), Path::to_path_buf);
    PackedModel::write(&qm, &out)?;
    let r = model_size_report(&qm, 8)?;
    println!("packed bytes: {}", r.packed_bytes);
    println!("model: {}", out.display());
    Ok(())
}

pub fn mac_report() -> Result<bool> {
    println!("kind, lut, ff, rel_power, rel_area");
    for e in cost_table() {
        println!("{}, {}, {}, {:.3}, {:.3}", e.kind, e.lut, e.ff, e.rel_power, e.rel_area);
    }
    let check = self_check();
    println!(
        "self-check: {} ({} PoT, {} APoT, {} uniform cases, {} mismatches)",
        if check.passed() { "PASS" } else { "FAIL" },
        check.pot_cases,
        check.apot_cases,
        check.uniform_cases,
        check.mismatches
    );
    Ok(check.passed())
}

pub fn sweep_pruning(ctx: &Ctx, master: Option<&Path>, pfs: &[f32]) -> Result<()> {
    if pfs.is_empty() || pfs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("--pf values must be non-empty and strictly increasing".into()));
    }
    let cfg = ctx.config.qat()?;
    let master = Model::load_json(&master.map_or_else(|| ctx.out("qat_master.json"), Path::to_path_buf))?;
    let schemes: Vec<QuantScheme> = cfg.effective_schemes(&master)?;
    let (_, test) = ctx.config.datasets()?;
    let rows = qat::pruning_sweep(&master, &schemes, pfs, &test)?;
    if rows.windows(2).any(|w| w[0].zero_fraction > w[1].zero_fraction) {
        return Err(Error::State("zero fraction decreased with a larger PF".into()));
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        writeln!(csv, "{},{:.6},{:.6}", r.pf, r.zero_fraction, r.accuracy).unwrap();
    }
    std::fs::write(ctx.out("pruning_sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn size_report(model: &Path, baseline_bits: u8, word_bits: u32) -> Result<()> {
    let qm = PackedModel::read(model)?;
    let s = model_size_report(&qm, baseline_bits)?;
    let t = memory_traffic_report(&qm, word_bits)?;
    println!("packed_bytes,baseline_bytes,baseline_bits,compression_ratio,zero_fraction,word_bits,words_read,words_read_8bit,transactions_vs_8bit_ratio");
    println!(
        "{},{},{},{:.6},{:.6},{},{},{},{:.6}",
        s.packed_bytes,
        s.baseline_bytes,
        s.baseline_bits,
        s.compression_ratio,
        s.zero_fraction,
        t.word_bits,
        t.words_read,
        t.words_read_8bit,
        t.transactions_vs_8bit_ratio
    );
    Ok(())
}
