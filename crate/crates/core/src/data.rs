//! Datasets: MNIST IDX and CIFAR-10 binary loaders, synthetic Gaussian
//! blobs, deterministic shuffling/batching and an augmentation hook.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviation of every synthetic blob.
pub const BLOB_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

/// Images `(N, C, H, W)` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::contract(format!(
                "dataset images must be (N,C,H,W), got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("dataset pixels must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn select(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::contract("cannot select an empty subset"));
        }
        Ok(Dataset {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Seeded random subset of `n` examples (all of them if `n >= len`).
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT, 1]));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx, self.split)
    }

    /// Holds out `fraction` of the examples (seeded) as a validation split.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n_val = (self.len() as f64 * fraction).round() as usize;
        if n_val == 0 || n_val >= self.len() {
            return Err(Error::contract(format!(
                "validation fraction {fraction} leaves an empty split of {} examples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT, 0]));
        let (val, train) = idx.split_at_mut(n_val);
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.select(train, Split::Train)?, self.select(val, Split::Val)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.u8(self.split.code());
        w.u32(self.classes as u32);
        w.tensor(&self.images);
        let labels: Vec<u8> = self.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
        w.bytes(&labels);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION, origin)?;
        let split = Split::from_code(r.u8()?).ok_or_else(|| r.invalid("unknown split tag"))?;
        let classes = r.u32()? as usize;
        let images = r.tensor::<f32>()?;
        let raw = r.bytes()?;
        if raw.len() % 4 != 0 {
            return Err(r.invalid("label block is not a whole number of u32"));
        }
        let labels = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        r.expect_end()?;
        Dataset::new(images, labels, classes, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?, path)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"BTDS";
const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", buf.len()),
        })
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let buf = container::read_file(path)?;
    let observed = be_u32(&buf, 0, path)?;
    if observed != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            observed,
            expected: magic,
        });
    }
    let ndim = (magic & 0xFF) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(be_u32(&buf, 4 + 4 * d, path)? as usize);
    }
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let have = buf.len() - start;
    if have < want {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("dimensions {dims:?} need {want} data bytes, found {have}"),
        });
    }
    if have > want {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes beyond the declared {dims:?}", have - want),
        });
    }
    Ok((dims, buf[start..].to_vec()))
}

/// Reads an IDX image/label pair (unsigned-byte images, rank 3).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, classes, split)
}

/// Reads the four standard MNIST files from `dir`, accepting both the
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> PathBuf {
        let dashed = dir.join(stem);
        if dashed.exists() {
            dashed
        } else {
            dir.join(stem.replacen("-idx", ".idx", 1))
        }
    };
    let train = load_idx(
        &find("train-images-idx3-ubyte"),
        &find("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &find("t10k-images-idx3-ubyte"),
        &find("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batches: each record is one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let buf = container::read_file(path)?;
        if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated {
                path: path.clone(),
                detail: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", buf.len()),
            });
        }
        for rec in buf.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("no CIFAR batch files given"));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

/// `k` Gaussian blobs (σ = [`BLOB_SIGMA`]) in `[0,1]^dim` whose means are at
/// least `margin` apart. Shape `(N, 1, 1, dim)`.
pub fn synth_blobs(k: usize, n_per_class: usize, dim: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if !(margin > 0.0) {
        return Err(Error::contract(format!("blob margin must be positive, got {margin}")));
    }
    if k < 2 || n_per_class == 0 || dim == 0 {
        return Err(Error::contract("blobs need k >= 2, n_per_class >= 1 and dim >= 1"));
    }
    let mut rng = rng::stream(seed, &[rng::TAG_BLOBS]);
    let (lo, hi) = (0.1, 0.9);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while means.len() < k {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::contract(format!(
                "cannot place {k} means {margin} apart in [{lo},{hi}]^{dim}"
            )));
        }
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..hi)).collect();
        let far = means
            .iter()
            .all(|m| m.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= margin);
        if far {
            means.push(c);
        }
    }
    let noise = Normal::new(0.0, BLOB_SIGMA).expect("valid sigma");
    let n = k * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        data.extend(
            means[class]
                .iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, dim], data)?, labels, k, Split::Train)
}

/// Index batches for one epoch: a permutation derived from
/// `(shuffle_seed, epoch)`, cut into chunks with the last partial kept.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(shuffle_seed, &[rng::TAG_SHUFFLE, epoch as u64]));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Materialized batches for one epoch, in order.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    batch_indices(dataset.len(), batch_size, shuffle_seed, epoch)?
        .iter()
        .map(|b| dataset.batch(b))
        .collect()
}

/// Consecutive unshuffled chunks, for evaluation.
pub fn sequential_indices(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Random crop after zero padding and random horizontal flip. Disabled by
/// default; digits must not be flipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default)]
    pub crop_padding: usize,
    #[serde(default)]
    pub horizontal_flip: bool,
}

impl Augment {
    pub fn is_noop(&self) -> bool {
        self.crop_padding == 0 && !self.horizontal_flip
    }

    pub fn apply(&self, images: &Tensor<f32>, seed: u64, epoch: usize, batch: usize) -> Tensor<f32> {
        if self.is_noop() {
            return images.clone();
        }
        let s = images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.crop_padding as i64;
        let mut rng = rng::stream(seed, &[rng::TAG_AUGMENT, epoch as u64, batch as u64]);
        let src = images.data();
        let mut out = vec![0.0f32; src.len()];
        for i in 0..n {
            let dy = if p > 0 { rng.random_range(-p..=p) } else { 0 };
            let dx = if p > 0 { rng.random_range(-p..=p) } else { 0 };
            let flip = self.horizontal_flip && rng.random_bool(0.5);
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as i64 + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        Tensor::new(s.to_vec(), out).expect("same shape")
    }
}
