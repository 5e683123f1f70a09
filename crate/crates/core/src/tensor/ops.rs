//! Forward and backward kernels shared by the autodiff tape and the
//! inference paths. Dot products accumulate in `f64` and are stored as `f32`.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Stride and zero padding of a square-windowed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvGeom {
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Dimension("convolution stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if kh > ph || kw > pw {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

fn dims<const N: usize>(t: &Tensor, what: &str) -> Result<[usize; N]> {
    t.shape().try_into().map_err(|_| {
        Error::Dimension(format!(
            "{what} must be {N}-dimensional, got shape {:?}",
            t.shape()
        ))
    })
}

/// `out[n,o] = sum_i x[n,i] * w[o,i] + b[o]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n, inp] = dims::<2>(x, "linear input")?;
    let [out, w_in] = dims::<2>(w, "linear weight")?;
    if inp != w_in {
        return Err(Error::Dimension(format!(
            "linear input has {inp} features but weight expects {w_in}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(Error::Dimension(format!(
                "linear bias shape {:?} does not match {out} outputs",
                b.shape()
            )));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![0.0f32; n * out];
    par::for_each_chunk_mut(&mut y, out, |row, yr| {
        let xr = &xd[row * inp..(row + 1) * inp];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &wd[o * inp..(o + 1) * inp];
            let mut acc = 0.0f64;
            for (a, c) in xr.iter().zip(wr) {
                acc += *a as f64 * *c as f64;
            }
            if let Some(b) = b {
                acc += b.data()[o] as f64;
            }
            *yo = acc as f32;
        }
    });
    Tensor::new(vec![n, out], y)
}

/// Gradients of [`linear`] w.r.t. input, weight and bias.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let (xd, wd) = (x.data(), w.data());

    let mut dx = vec![0.0f32; n * inp];
    par::for_each_chunk_mut(&mut dx, inp, |row, dxr| {
        let g = &grad_out[row * out..(row + 1) * out];
        for (i, d) in dxr.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (o, go) in g.iter().enumerate() {
                acc += *go as f64 * wd[o * inp + i] as f64;
            }
            *d = acc as f32;
        }
    });

    let mut dw = vec![0.0f32; out * inp];
    par::for_each_chunk_mut(&mut dw, inp, |o, dwr| {
        for (i, d) in dwr.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for r in 0..n {
                acc += grad_out[r * out + o] as f64 * xd[r * inp + i] as f64;
            }
            *d = acc as f32;
        }
    });

    let db = (0..out)
        .map(|o| (0..n).map(|r| grad_out[r * out + o] as f64).sum::<f64>() as f32)
        .collect();
    (dx, dw, db)
}

/// Cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let [n, c, h, wd_] = dims::<4>(x, "conv2d input")?;
    let [f, wc, kh, kw] = dims::<4>(w, "conv2d weight")?;
    if c != wc {
        return Err(Error::Dimension(format!(
            "conv2d input has {c} channels but weight expects {wc}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [f] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?} does not match {f} filters",
                b.shape()
            )));
        }
    }
    let (oh, ow) = geom.output_size(h, wd_, kh, kw)?;
    let (xd, wdat) = (x.data(), w.data());
    let (kernel, positions) = (c * kh * kw, oh * ow);
    let mut y = vec![0.0f32; n * f * positions];
    par::for_each_chunk_mut(&mut y, f * positions, |ni, yn| {
        let cols = im2col(&xd[ni * c * h * wd_..(ni + 1) * c * h * wd_], [c, h, wd_], kh, kw, geom, oh, ow);
        let mut acc = vec![0.0f64; positions];
        for (fi, plane) in yn.chunks_mut(positions).enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for k in 0..kernel {
                let wk = wdat[fi * kernel + k] as f64;
                for (a, col) in acc.iter_mut().zip(&cols[k * positions..(k + 1) * positions]) {
                    *a += wk * col;
                }
            }
            let bias = b.map_or(0.0, |b| b.data()[fi] as f64);
            for (o, a) in plane.iter_mut().zip(&acc) {
                *o = (a + bias) as f32;
            }
        }
    });
    Tensor::new(vec![n, f, oh, ow], y)
}

/// Patch matrix `[c*kh*kw, oh*ow]` of one sample; padded taps are zero.
fn im2col(
    xn: &[f32],
    [c, h, w]: [usize; 3],
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let positions = oh * ow;
    let mut cols = vec![0.0f64; c * kh * kw * positions];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * positions..][..positions];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = xn[(ci * h + iy as usize) * w + ix as usize] as f64;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeom,
    grad_out: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = geom
        .output_size(h, wd_, kh, kw)
        .expect("geometry validated in forward");
    let (xd, wdat) = (x.data(), w.data());
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let in_plane = c * h * wd_;
    let (kernel, positions) = (c * kh * kw, oh * ow);

    // Per sample: input gradient and that sample's share of the weight
    // gradient. Shares are summed in sample order afterwards.
    let per_sample = par::map_range(n, |ni| {
        let cols = im2col(&xd[ni * in_plane..(ni + 1) * in_plane], [c, h, wd_], kh, kw, geom, oh, ow);
        let g = &grad_out[ni * f * positions..(ni + 1) * f * positions];
        let mut dw = vec![0.0f64; f * kernel];
        let mut dcols = vec![0.0f64; kernel * positions];
        for fi in 0..f {
            let gf: Vec<f64> = g[fi * positions..(fi + 1) * positions].iter().map(|&v| v as f64).collect();
            for k in 0..kernel {
                let col = &cols[k * positions..(k + 1) * positions];
                dw[fi * kernel + k] = gf.iter().zip(col).map(|(a, b)| a * b).sum();
                let wk = wdat[fi * kernel + k] as f64;
                for (d, gv) in dcols[k * positions..(k + 1) * positions].iter_mut().zip(&gf) {
                    *d += wk * gv;
                }
            }
        }
        let mut dx = vec![0.0f64; in_plane];
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &dcols[((ci * kh + ky) * kw + kx) * positions..][..positions];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < wd_ as isize {
                                dx[(ci * h + iy as usize) * wd_ + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    });

    let mut dx = Vec::with_capacity(n * in_plane);
    let mut dw_acc = vec![0.0f64; f * kernel];
    for (dxn, dwn) in per_sample {
        dx.extend(dxn.into_iter().map(|v| v as f32));
        for (a, v) in dw_acc.iter_mut().zip(dwn) {
            *a += v;
        }
    }
    let dw = dw_acc.into_iter().map(|v| v as f32).collect();

    let db = (0..f)
        .map(|fi| {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = ni * f * positions + fi * positions;
                acc += grad_out[base..base + positions]
                    .iter()
                    .map(|&g| g as f64)
                    .sum::<f64>();
            }
            acc as f32
        })
        .collect();
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Non-overlapping `size x size` max pooling over `x[N,C,H,W]`. Also returns,
/// for every output element, the flat index of the input element it copied
/// (first maximum wins on ties).
pub fn max_pool2d(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims::<4>(x, "max_pool2d input")?;
    if size == 0 || size > h || size > w {
        return Err(Error::Dimension(format!(
            "pool window {size} does not fit {h}x{w} input"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Mean softmax cross-entropy of `logits[N,K]` against integer labels.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let [n, k] = dims::<2>(logits, "cross_entropy logits")?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside [0, {k})")));
    }
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = ((v as f64 - max).exp() / denom) as f32;
        }
        total += denom.ln() - (row[label] as f64 - max);
    }
    Ok(((total / n as f64) as f32, probs))
}

/// Folds a batch-norm gain into a layer's weight scale so inference applies a
/// single multiplier per output channel.
pub fn batchnorm_fold(gain: f32, scale: f32) -> f32 {
    gain * scale
}

/// Per-channel [`batchnorm_fold`].
pub fn batchnorm_fold_channels(gains: &[f32], scale: f32) -> Vec<f32> {
    gains.iter().map(|&g| batchnorm_fold(g, scale)).collect()
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>())
    }

    #[test]
    fn linear_identity_and_hand_values() {
        let y = linear(
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            Some(&t(&[2], &[0.0, 0.0])),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = linear(
            &t(&[1, 2], &[1.0, 1.0]),
            &t(&[1, 2], &[2.0, 3.0]),
            Some(&t(&[1], &[1.0])),
        )
        .unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, w, b) = (random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng));
        let y = linear(&x, &w, Some(&b)).unwrap();
        for n in 0..3 {
            for o in 0..5 {
                let mut acc = 0.0f64;
                for i in 0..4 {
                    acc += x.data()[n * 4 + i] as f64 * w.data()[o * 4 + i] as f64;
                }
                acc += b.data()[o] as f64;
                assert_eq!(y.data()[n * 5 + o], acc as f32);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let r = linear(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[2, 4]), None);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_ones_and_delta_kernel() {
        let y = conv2d(
            &t(&[1, 1, 3, 3], &[1.0; 9]),
            &t(&[1, 1, 3, 3], &[1.0; 9]),
            None,
            ConvGeom::default(),
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 5, 4], &mut rng);
        let mut delta = [0.0f32; 9];
        delta[4] = 1.0;
        let y = conv2d(&x, &t(&[1, 1, 3, 3], &delta), None, ConvGeom { stride: 1, padding: 1 }).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let r = conv2d(
            &Tensor::zeros(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            None,
            ConvGeom::default(),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
        let r = conv2d(
            &Tensor::zeros(&[1, 2, 4, 4]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            None,
            ConvGeom::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        assert_eq!(relu(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
        let (loss, probs) = cross_entropy(&Tensor::zeros(&[2, 5]), &[0, 4]).unwrap();
        assert!((loss as f64 - 5f64.ln()).abs() < 1e-6);
        assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-7));
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn fold_is_product() {
        assert_eq!(batchnorm_fold(2.0, 0.5), 1.0);
        assert_eq!(batchnorm_fold_channels(&[1.0, 4.0], 0.25), vec![0.25, 1.0]);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 0.0, 1.0]);
        let (y, idx) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);
    }
}
