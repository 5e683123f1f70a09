#![allow(dead_code)]

use potq::data::{load_idx_dir, Dataset};
use potq::optim::SgdConfig;
use potq::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are out of finite-difference
/// reach.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.02 apart in random order, so no pooling window
/// has a near-tie.
pub fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.02 - n as f32 * 0.01).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error `|a - n| / max(|a|, |n|)` between the tape gradients and
/// central finite differences (step `eps`) for every input of `build`.
/// `build` must return a scalar.
pub fn grad_check<F>(inputs: &[Tensor], eps: f32, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |xs: &[Tensor], grads: bool| -> (f64, Vec<Vec<f32>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(grads))).collect();
        let loss = build(&mut tape, &vars);
        let value = tape.value(loss).data()[0] as f64;
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect())
    };
    let (_, analytic) = run(inputs, true);
    let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let h = (plus[k].data()[i] - minus[k].data()[i]) as f64;
            let numeric = (run(&plus, false).0 - run(&minus, false).0) / h;
            let a = analytic[k][i] as f64;
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
        }
    }
    diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-12)
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar
/// with a non-trivial upstream gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.leaf(random_tensor(&shape, &mut rng(seed)));
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

pub fn digits_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits")
}

pub fn digits() -> (Dataset, Dataset) {
    load_idx_dir(&digits_dir()).expect("bundled digits dataset")
}

/// Float pre-training recipe for the bundled desk task.
pub fn desk_pretrain(seed: u64) -> SgdConfig {
    SgdConfig {
        base_lr: 0.05,
        momentum: 0.9,
        epochs: 15,
        lr_schedule: vec![(8, 0.1), (12, 0.1)],
        seed,
        batch_size: 32,
    }
}

pub const GRAD_EPS: f32 = 1e-2;

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// One gradient check per autograd operator on shapes drawn from `seed`.
pub fn grad_cases(seed: u64) -> Vec<(&'static str, f64)> {
    use potq::tensor::ConvGeom;
    let mut r = rng(seed);
    let mut out = Vec::new();

    let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 5)];
    let (a, b) = (random_tensor(&shape, &mut r), random_tensor(&shape, &mut r));
    out.push(("add", grad_check(&[a.clone(), b.clone()], GRAD_EPS, |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, seed)
    })));
    out.push(("mul", grad_check(&[a.clone(), b], GRAD_EPS, |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, seed)
    })));
    let k = r.gen_range(-2.0f32..2.0);
    out.push(("scale", grad_check(std::slice::from_ref(&a), GRAD_EPS, |t, v| {
        let y = t.scale(v[0], k);
        project(t, y, seed)
    })));
    out.push(("sum", grad_check(&[a], GRAD_EPS, |t, v| t.sum(v[0]))));

    let (n, i, o) = (dim(&mut r, 1, 4), dim(&mut r, 1, 6), dim(&mut r, 1, 5));
    let lin = [random_tensor(&[n, i], &mut r), random_tensor(&[o, i], &mut r), random_tensor(&[o], &mut r)];
    out.push(("linear", grad_check(&lin, GRAD_EPS, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, seed)
    })));

    let (c, f, kk) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let geom = ConvGeom {
        stride: dim(&mut r, 1, 2),
        padding: dim(&mut r, 0, 1),
    };
    let hw = kk + dim(&mut r, 0, 3);
    let conv = [
        random_tensor(&[dim(&mut r, 1, 2), c, hw, hw + 1], &mut r),
        random_tensor(&[f, c, kk, kk], &mut r),
        random_tensor(&[f], &mut r),
    ];
    out.push(("conv2d", grad_check(&conv, GRAD_EPS, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), geom).unwrap();
        project(t, y, seed)
    })));
    out.push(("conv2d_nobias", grad_check(&conv[..2], GRAD_EPS, |t, v| {
        let y = t.conv2d(v[0], v[1], None, geom).unwrap();
        project(t, y, seed)
    })));

    let x = away_from_zero(&[dim(&mut r, 1, 3), dim(&mut r, 2, 6)], &mut r);
    out.push(("relu", grad_check(&[x], GRAD_EPS, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })));

    let size = dim(&mut r, 1, 2);
    let x = spaced(&[dim(&mut r, 1, 2), dim(&mut r, 1, 2), size * dim(&mut r, 1, 3), size * 2], &mut r);
    out.push(("max_pool2d", grad_check(std::slice::from_ref(&x), GRAD_EPS, |t, v| {
        let y = t.max_pool2d(v[0], size).unwrap();
        project(t, y, seed)
    })));
    let flat = [x.shape()[0], x.numel() / x.shape()[0]];
    out.push(("reshape", grad_check(&[x], GRAD_EPS, |t, v| {
        let y = t.reshape(v[0], &flat).unwrap();
        project(t, y, seed)
    })));

    let (n, classes) = (dim(&mut r, 1, 5), dim(&mut r, 2, 6));
    let logits = random_tensor(&[n, classes], &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    out.push(("cross_entropy", grad_check(&[logits], GRAD_EPS, |t, v| {
        t.cross_entropy(v[0], &labels).unwrap()
    })));
    out
}
