//! Dataset loading (IDX image files), deterministic batching, and synthetic
//! quality-stratified blob datasets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Quality tag attached to synthetic samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Good,
    Low,
    Unknown,
}

impl Quality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quality::Good => "good",
            Quality::Low => "low",
            Quality::Unknown => "unknown",
        }
    }
}

/// Immutable sample collection.
///
/// IDX-loaded images are [n, 1, h, w] with pixels scaled into [0, 1];
/// synthetic vector datasets are [n, d].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub quality: Option<Vec<Quality>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample dimensions (everything after the leading n axis).
    pub fn sample_dims(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn flat_dim(&self) -> usize {
        self.sample_dims().iter().product()
    }

    /// Gathers the given rows into a fresh batch tensor plus labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let dims = self.sample_dims().to_vec();
        let stride: usize = dims.iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        let src = self.features.data();
        for &i in idx {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![idx.len()];
        shape.extend(dims);
        let batch = Tensor::new(shape, data).expect("gather shape");
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (batch, labels)
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let stride = self.flat_dim();
        let mut shape = self.features.shape().to_vec();
        shape[0] = n;
        let data = self.features.data()[..n * stride].to_vec();
        self.features = Tensor::new(shape, data).expect("truncate shape");
        self.labels.truncate(n);
        if let Some(q) = &mut self.quality {
            q.truncate(n);
        }
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair: big-endian magic and dimensions,
/// raw unsigned bytes, pixels scaled to [0, 1] by /255.
pub fn parse_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut img)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad images magic 0x{magic:08x} in {}, expected 0x{IDX_IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut img)? as usize;
    let h = read_u32_be(&mut img)? as usize;
    let w = read_u32_be(&mut img)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    img.read_exact(&mut pixels)?;

    let mut lab = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lab)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad labels magic 0x{magic:08x} in {}, expected 0x{IDX_LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let n_labels = read_u32_be(&mut lab)? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "count mismatch: {n} images vs {n_labels} labels"
        )));
    }
    let mut raw_labels = vec![0u8; n];
    lab.read_exact(&mut raw_labels)?;

    let features = Tensor::new(
        vec![n, 1, h, w],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        features,
        labels,
        class_count,
        quality: None,
    })
}

/// Writes an IDX image/label file pair, bit-exact: big-endian magic and
/// counts, pixel bytes recovered by rounding value*255.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let dims = dataset.sample_dims();
    if dims.len() != 3 {
        return Err(Error::Dimension {
            context: "write_idx",
            left: dataset.features.shape().to_vec(),
            right: vec![0, 1, 0, 0],
        });
    }
    let (h, w) = (dims[1], dims[2]);
    let n = dataset.len();

    let mut img = BufWriter::new(File::create(images_path)?);
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img.write_all(&(n as u32).to_be_bytes())?;
    img.write_all(&(h as u32).to_be_bytes())?;
    img.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = dataset
        .features
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    img.write_all(&bytes)?;
    img.flush()?;

    let mut lab = BufWriter::new(File::create(labels_path)?);
    lab.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lab.write_all(&(n as u32).to_be_bytes())?;
    let label_bytes: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    lab.write_all(&label_bytes)?;
    lab.flush()?;
    Ok(())
}

/// Deterministic batch schedule over a dataset.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle_seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        Ok(BatchPlan {
            batch_size,
            shuffle_seed,
            drop_last,
        })
    }
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    drop_last: bool,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let idx = &self.order[self.pos..self.pos + take];
        self.pos += take;
        Some(self.dataset.gather(idx))
    }
}

/// Iterates the dataset once in a permutation drawn from splitmix64-seeded
/// xoshiro256** (Fisher-Yates); the same seed yields an identical sequence.
pub fn batches<'a>(dataset: &'a Dataset, plan: &BatchPlan) -> Batches<'a> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = Xoshiro256StarStar::seed_from_u64(plan.shuffle_seed);
    order.shuffle(&mut rng);
    Batches {
        dataset,
        order,
        pos: 0,
        batch_size: plan.batch_size,
        drop_last: plan.drop_last,
    }
}

/// Synthetic quality-stratified dataset: class means on the unit circle (or
/// the standard basis when it fits), plus Gaussian noise whose scale depends
/// on the per-sample quality tag.
///
/// Within each class the first floor(low_fraction * n_per_class) samples are
/// tagged low (noise sigma_low), the rest good (sigma_good). A standard
/// normal draw is consumed for every coordinate regardless of the tag, so
/// equal sigmas produce identically distributed subsets.
#[allow(clippy::too_many_arguments)]
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    noise_good: f64,
    noise_low: f64,
    low_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Domain(format!(
            "synthetic blobs need at least 2 classes, got {classes}"
        )));
    }
    if dim < 2 {
        return Err(Error::Domain(format!(
            "synthetic blobs need dimension >= 2, got {dim}"
        )));
    }
    if !(noise_good >= 0.0) || !(noise_low >= noise_good) {
        return Err(Error::Domain(format!(
            "noise levels must satisfy 0 <= sigma_good <= sigma_low, got {noise_good} and {noise_low}"
        )));
    }
    if !(0.0..=1.0).contains(&low_fraction) {
        return Err(Error::Domain(format!(
            "low_fraction must lie in [0, 1], got {low_fraction}"
        )));
    }

    // class k mean: e_k when the basis fits, otherwise spaced on the unit
    // circle in the first two dimensions
    let mean = |k: usize, j: usize| -> f64 {
        if classes <= dim {
            if j == k {
                1.0
            } else {
                0.0
            }
        } else {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            match j {
                0 => angle.cos(),
                1 => angle.sin(),
                _ => 0.0,
            }
        }
    };

    let n_low = (low_fraction * n_per_class as f64).floor() as usize;
    let total = classes * n_per_class;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut quality = Vec::with_capacity(total);

    for class in 0..classes {
        for i in 0..n_per_class {
            let (sigma, tag) = if i < n_low {
                (noise_low, Quality::Low)
            } else {
                (noise_good, Quality::Good)
            };
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mean(class, j) + sigma * z);
            }
            labels.push(class);
            quality.push(tag);
        }
    }

    Ok(Dataset {
        features: Tensor::new(vec![total, dim], data)?,
        labels,
        class_count: classes,
        quality: Some(quality),
    })
}

/// CSV export of a synthetic dataset: `label,quality,f0,...,f{d-1}`.
pub fn write_synth_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let d = dataset.flat_dim();
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    writeln!(out, "label,quality,{}", header.join(","))?;
    let src = dataset.features.data();
    for i in 0..dataset.len() {
        let tag = dataset
            .quality
            .as_ref()
            .map_or(Quality::Unknown, |q| q[i])
            .as_str();
        let row: Vec<String> = (0..d).map(|j| format!("{}", src[i * d + j])).collect();
        writeln!(out, "{},{},{}", dataset.labels[i], tag, row.join(","))?;
    }
    out.flush()?;
    Ok(())
}
