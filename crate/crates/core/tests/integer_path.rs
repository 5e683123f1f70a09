mod common;

use common::*;
use potq::model::{Model, ModelSpec};
use potq::qinference::{InferencePath, IntegerOptions, PackedModel, QuantModel};
use potq::quantizers::{PruneConfig, QuantScheme};
use potq::shift_mac::OverflowMode;

fn quantized_desk(scheme: QuantScheme, seed: u64) -> (QuantModel, potq::Tensor) {
    let m = Model::init(&ModelSpec::desk(10), seed).unwrap();
    let qm = QuantModel::from_float(&m, &[scheme; 3], PruneConfig::default()).unwrap();
    let x = random_tensor(&[16, 1, 8, 8], &mut rng(seed + 100));
    (qm, x)
}

fn max_abs_diff(a: &potq::Tensor, b: &potq::Tensor) -> f32 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

fn wide(act_bits: u8) -> IntegerOptions {
    IntegerOptions {
        act_bits,
        widths: Some((40, 48)),
        overflow: OverflowMode::Saturate,
    }
}

#[test]
fn integer_logits_converge_to_float_with_activation_bits() {
    for scheme in [QuantScheme::pot(4), QuantScheme::uniform(4), QuantScheme::apot()] {
        let (mut qm, x) = quantized_desk(scheme, 1);
        qm.calibrate(&x).unwrap();
        let float = qm.forward(&x, InferencePath::Float).unwrap().logits;
        let errs: Vec<f32> = [8, 12, 16]
            .into_iter()
            .map(|b| {
                let out = qm.forward_integer(&x, wide(b)).unwrap();
                assert_eq!(out.stats().events(), 0);
                max_abs_diff(&out.logits, &float)
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{scheme:?}: {errs:?}");
        assert!(errs[2] < 1e-3, "{scheme:?}: {errs:?}");
    }
}

#[test]
fn packed_model_runs_the_same_integer_path() {
    let (mut qm, x) = quantized_desk(QuantScheme::pot(4), 2);
    qm.calibrate(&x).unwrap();
    let back = PackedModel::decode(&PackedModel::encode(&qm).unwrap()).unwrap();
    let opts = IntegerOptions::default();
    let a = qm.forward_integer(&x, opts).unwrap();
    let b = back.forward_integer(&x, opts).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.stats(), b.stats());
}

#[test]
fn headroom_calibration_removes_accumulator_events() {
    let (mut qm, x) = quantized_desk(QuantScheme::pot(4), 3);
    // Narrow accumulator so max-abs calibration overflows.
    let opts = IntegerOptions {
        widths: Some((16, 12)),
        ..IntegerOptions::default()
    };
    qm.calibrate(&x).unwrap();
    assert!(qm.forward_integer(&x, opts).unwrap().stats().accumulator_events > 0);
    qm.calibrate_with_headroom(&x, opts, 0.9).unwrap();
    assert_eq!(qm.forward_integer(&x, opts).unwrap().stats().accumulator_events, 0);
}

#[test]
fn parallel_and_sequential_modes_agree() {
    use potq::data::gaussian_blobs;
    use potq::par;
    use potq::qat::{train, QatConfig, QatMethod};

    let (mut qm, x) = quantized_desk(QuantScheme::pot(4), 4);
    qm.calibrate(&x).unwrap();
    let run = || qm.forward_integer(&x, IntegerOptions::default()).unwrap();
    let (a, b) = (run(), par::sequential(run));
    assert_eq!((&a.logits, a.stats()), (&b.logits, b.stats()));

    let data = gaussian_blobs(10, 8, [1, 8, 8], 0.5, 4).unwrap();
    let m = Model::init(&ModelSpec::desk(10), 4).unwrap();
    let mut cfg = QatConfig::uniform_over(&m, QatMethod::Ste, QuantScheme::pot(4));
    cfg.sgd.epochs = 2;
    let fit = || train(&cfg, &m, &data, &data).unwrap();
    let (p, s) = (fit(), par::sequential(fit));
    assert_eq!(p.history, s.history);
    assert_eq!(p.master.unwrap().weights(), s.master.unwrap().weights());
}
