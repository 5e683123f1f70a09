//! Image-classification datasets: IDX and CSV readers plus a synthetic
//! Gaussian-blob generator for hermetic runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    sample_shape: [usize; 3],
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, sample_shape: [usize; 3]) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || labels.is_empty() || images.len() != per * labels.len() {
            return Err(Error::Input(format!(
                "{} pixel values do not form {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            images,
            labels,
            sample_shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the given samples into an `[N, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.sample_shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent sizes");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Index lists of consecutive batches; shuffled when a seed is given.
    pub fn batch_indices(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        let per: usize = self.sample_shape.iter().product();
        Self {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            sample_shape: self.sample_shape,
            num_classes: self.num_classes,
        }
    }

    /// Same images with labels permuted by `seed`.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut d = self.clone();
        d.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        d
    }
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an unsigned-byte IDX image file (`N x H x W`), scaling pixels to
/// `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize, [usize; 3])> {
    let magic = be_u32(bytes, 0)?;
    if magic >> 8 != 0x08 || !(3..=4).contains(&(magic & 0xff)) {
        return Err(Error::Format(format!("not a ubyte image IDX file (magic {magic:#010x})")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let shape = if ndim == 3 {
        [1, dims[1], dims[2]]
    } else {
        [dims[1], dims[2], dims[3]]
    };
    let n = dims[0];
    let start = 4 + 4 * ndim;
    let need = n * shape.iter().product::<usize>();
    let body = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Format("IDX image payload is truncated".into()))?;
    Ok((body.iter().map(|&b| b as f32 / 255.0).collect(), n, shape))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0801 {
        return Err(Error::Format(format!("not a ubyte label IDX file (magic {magic:#010x})")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("IDX label payload is truncated".into()))?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (pixels, n, shape) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new(pixels, labels, shape)
}

/// Loads `train-*` and `test-*` IDX pairs from a directory laid out like the
/// classic digit datasets.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images.idx3-ubyte"),
        &dir.join("train-labels.idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("test-images.idx3-ubyte"),
        &dir.join("test-labels.idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Reads `label,v0,v1,...` rows (no header) with pixel values used as-is.
pub fn load_csv(path: &Path, sample_shape: [usize; 3]) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let per: usize = sample_shape.iter().product();
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',').map(str::trim);
        let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
        let label = fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| bad("bad label"))?;
        let row: Vec<f32> = fields
            .map(|f| f.parse::<f32>().map_err(|_| bad("bad pixel value")))
            .collect::<Result<_>>()?;
        if row.len() != per {
            return Err(bad(&format!("expected {per} values, got {}", row.len())));
        }
        labels.push(label);
        images.extend(row);
    }
    Dataset::new(images, labels, sample_shape)
}

/// Gaussian blobs: one random centre per class in pixel space, samples drawn
/// around it with standard deviation `spread`.
pub fn gaussian_blobs(
    classes: usize,
    per_class: usize,
    sample_shape: [usize; 3],
    spread: f32,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::Input("blob dataset needs at least one sample".into()));
    }
    let per: usize = sample_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    let centres: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut order: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut images = Vec::with_capacity(order.len() * per);
    for &label in &order {
        images.extend(centres[label].iter().map(|c| c + spread * unit.sample(&mut rng)));
    }
    Dataset::new(images, order, sample_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, h, w] {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_round_trip() {
        let bytes = idx_images(2, 1, 2, &[0, 255, 51, 102]);
        let (px, n, shape) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, shape), (2, [1, 1, 2]));
        assert_eq!(px, vec![0.0, 1.0, 0.2, 0.4]);
        let mut lb = vec![0, 0, 8, 1];
        lb.extend(2u32.to_be_bytes());
        lb.extend([3, 7]);
        assert_eq!(parse_idx_labels(&lb).unwrap(), vec![3, 7]);
    }

    #[test]
    fn idx_rejects_garbage() {
        assert!(matches!(parse_idx_images(&[1, 2, 3]), Err(Error::Format(_))));
        assert!(parse_idx_images(&idx_images(2, 2, 2, &[0; 3])).is_err());
        assert!(parse_idx_labels(&[0, 0, 8, 3, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn csv_reader() {
        let dir = std::env::temp_dir().join(format!("potq-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.csv");
        std::fs::write(&p, "1,0.5,0.25\n0,1,0\n\n").unwrap();
        let d = load_csv(&p, [1, 1, 2]).unwrap();
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.num_classes(), 2);
        std::fs::write(&p, "1,0.5\n").unwrap();
        assert!(load_csv(&p, [1, 1, 2]).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = gaussian_blobs(3, 10, [1, 2, 2], 0.1, 4).unwrap();
        let b = gaussian_blobs(3, 10, [1, 2, 2], 0.1, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        let (x, y) = a.batch(&[0, 1]);
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(y.len(), 2);
    }

    #[test]
    fn batches_cover_all_samples() {
        let d = gaussian_blobs(2, 5, [1, 1, 1], 0.1, 0).unwrap();
        let b = d.batch_indices(3, Some(1));
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(d.batch_indices(3, Some(1)), b);
    }
}
