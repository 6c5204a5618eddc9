//! Datasets: synthetic long-tailed tasks, open-set auxiliary pools, long-tail
//! subsampling and the on-disk formats.
//!
//! Every generator is a pure function of its parameters and seed.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const DATASET_MAGIC: &[u8; 5] = b"OSDS1";

const CIFAR_PIXELS: usize = 3072;
const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid imbalance ratio {0}: must be >= 1")]
    InvalidRatio(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("class {class} has {available} samples but the profile requests {requested}")]
    Capacity {
        class: usize,
        available: usize,
        requested: u64,
    },
    #[error("{path}: length {len} is not a multiple of the {CIFAR_RECORD}-byte record size")]
    Truncated { path: String, len: usize },
    #[error("{path}: record {record} has label byte {label} (expected 0..=9)")]
    CorruptRecord {
        path: String,
        record: usize,
        label: u8,
    },
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Features with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DataError::InvalidParameter(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() == 0 {
            return Err(DataError::InvalidParameter(
                "feature dimension must be >= 1".into(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::InvalidParameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Gaussian,
    Rademacher,
    Blobs,
    ShiftedMixture,
    File,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Rademacher => "rademacher",
            Self::Blobs => "blobs",
            Self::ShiftedMixture => "shifted-mixture",
            Self::File => "file",
        }
    }
}

/// Unlabelled open-set instances.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryPool {
    features: Matrix,
    kind: PoolKind,
    /// Generating cluster means, for shifted-mixture pools only.
    centers: Vec<Vec<f64>>,
}

impl AuxiliaryPool {
    pub fn new(features: Matrix, kind: PoolKind) -> Result<Self> {
        if features.rows() == 0 {
            return Err(DataError::InvalidParameter(
                "auxiliary pool must not be empty".into(),
            ));
        }
        if features.cols() == 0 {
            return Err(DataError::InvalidParameter(
                "feature dimension must be >= 1".into(),
            ));
        }
        Ok(Self {
            features,
            kind,
            centers: Vec::new(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// First `size` instances (the pool is already in random order).
    pub fn truncated(&self, size: usize) -> Result<Self> {
        if size == 0 || size > self.len() {
            return Err(DataError::InvalidParameter(format!(
                "cannot take {size} instances from a pool of {}",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..size).collect();
        Ok(Self {
            features: self.features.select_rows(&idx),
            kind: self.kind,
            centers: self.centers.clone(),
        })
    }
}

/// Target per-class counts of an exponentially decaying profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailProfile {
    pub counts: Vec<u64>,
    pub ratio: f64,
    pub base: u64,
}

/// `counts[j] = round(n_max · ratio^{−j/(K−1)})`, floored at one sample.
pub fn longtail_counts(n_max: u64, num_classes: usize, ratio: f64) -> Result<LongTailProfile> {
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(DataError::InvalidRatio(ratio));
    }
    if n_max == 0 || num_classes < 2 {
        return Err(DataError::InvalidParameter(format!(
            "need n_max >= 1 and K >= 2, got n_max={n_max}, K={num_classes}"
        )));
    }
    let last = (num_classes - 1) as f64;
    let counts = (0..num_classes)
        .map(|j| {
            let c = (n_max as f64 * ratio.powf(-(j as f64) / last)).round();
            (c as u64).max(1)
        })
        .collect();
    Ok(LongTailProfile {
        counts,
        ratio,
        base: n_max,
    })
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random orthonormal vectors (Gram–Schmidt on Gaussian draws).
fn orthonormal_frame(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for u in &frame {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            frame.push(v);
        }
    }
    frame
}

/// Class means at `K` equally spaced directions, at distance `mean_radius`
/// from the origin.
///
/// With `d >= K` the directions are mutually orthogonal (a random rotation of
/// the first `K` axes); otherwise they are equally spaced angles on a circle
/// in a random plane.
pub fn class_means(num_classes: usize, dim: usize, mean_radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed);
    if dim >= num_classes {
        orthonormal_frame(num_classes, dim, &mut rng)
            .into_iter()
            .map(|u| u.into_iter().map(|a| a * mean_radius).collect())
            .collect()
    } else {
        let plane = orthonormal_frame(2, dim, &mut rng);
        (0..num_classes)
            .map(|j| {
                let theta = 2.0 * std::f64::consts::PI * j as f64 / num_classes as f64;
                let (s, c) = theta.sin_cos();
                (0..dim)
                    .map(|i| mean_radius * (c * plane[0][i] + s * plane[1][i]))
                    .collect()
            })
            .collect()
    }
}

/// Isotropic Gaussian classes around [`class_means`], emitted class by class.
pub fn gen_gaussian_classes(
    num_classes: usize,
    dim: usize,
    per_class: &[u64],
    mean_radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if per_class.len() != num_classes {
        return Err(DataError::InvalidParameter(format!(
            "per_class has {} entries for {num_classes} classes",
            per_class.len()
        )));
    }
    if dim < 2 {
        return Err(DataError::InvalidParameter("dimension must be >= 2".into()));
    }
    if !(sigma >= 0.0) {
        return Err(DataError::InvalidParameter(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    let means = class_means(num_classes, dim, mean_radius, seed);
    // Sampling noise uses its own stream so means do not depend on counts.
    let mut rng = rng_for(seed ^ 0x9e37_79b9_7f4a_7c15);
    let total: u64 = per_class.iter().sum();
    let mut data = Vec::with_capacity(total as usize * dim);
    let mut labels = Vec::with_capacity(total as usize);
    for (class, (&count, mean)) in per_class.iter().zip(&means).enumerate() {
        for _ in 0..count {
            data.extend(mean.iter().map(|m| m + sigma * normal(&mut rng)));
            labels.push(class);
        }
    }
    let features = Matrix::from_vec(labels.len(), dim, data).expect("shape");
    LabeledDataset::new(features, labels, num_classes)
}

/// Train and test sets drawn from the same class means. Each class contributes
/// its first `train[j]` samples to the train set and the next `test[j]` to the
/// test set.
pub fn gen_gaussian_split(
    num_classes: usize,
    dim: usize,
    train: &[u64],
    test: &[u64],
    mean_radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if train.len() != num_classes || test.len() != num_classes {
        return Err(DataError::InvalidParameter(format!(
            "need {num_classes} train and test counts, got {} and {}",
            train.len(),
            test.len()
        )));
    }
    let per_class: Vec<u64> = train.iter().zip(test).map(|(a, b)| a + b).collect();
    let all = gen_gaussian_classes(num_classes, dim, &per_class, mean_radius, sigma, seed)?;
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    let mut start = 0usize;
    for (&a, &b) in train.iter().zip(test) {
        let (a, b) = (a as usize, b as usize);
        tr.extend(start..start + a);
        te.extend(start + a..start + a + b);
        start += a + b;
    }
    Ok((all.subset(&tr), all.subset(&te)))
}

/// Samples `profile.counts[j]` instances of every class without replacement.
pub fn subsample_longtail(
    dataset: &LabeledDataset,
    profile: &LongTailProfile,
    seed: u64,
) -> Result<LabeledDataset> {
    let k = dataset.num_classes();
    if profile.counts.len() != k {
        return Err(DataError::InvalidParameter(format!(
            "profile has {} classes, dataset has {k}",
            profile.counts.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for (class, (members, &want)) in by_class.iter().zip(&profile.counts).enumerate() {
        if members.len() < want as usize {
            return Err(DataError::Capacity {
                class,
                available: members.len(),
                requested: want,
            });
        }
    }
    let mut rng = rng_for(seed);
    let mut picked = Vec::new();
    for (members, &want) in by_class.iter_mut().zip(&profile.counts) {
        let (chosen, _) = members.partial_shuffle(&mut rng, want as usize);
        picked.extend_from_slice(chosen);
    }
    Ok(dataset.subset(&picked))
}

fn default_blob_width() -> usize {
    5
}
fn default_low() -> f64 {
    -1.0
}
fn default_high() -> f64 {
    1.0
}
fn default_clusters() -> usize {
    8
}
fn default_one() -> f64 {
    1.0
}

/// Recipe for a synthetic auxiliary or OOD pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoolSpec {
    /// i.i.d. `N(0, scale²)` entries.
    Gaussian {
        #[serde(default = "default_one")]
        scale: f64,
    },
    /// i.i.d. `±scale` entries with equal probability.
    Rademacher {
        #[serde(default = "default_one")]
        scale: f64,
    },
    /// Uniform noise smoothed by a circular moving average of `width` and
    /// binarised at its median to `{low, high}`.
    Blobs {
        #[serde(default = "default_blob_width")]
        width: usize,
        #[serde(default = "default_low")]
        low: f64,
        #[serde(default = "default_high")]
        high: f64,
    },
    /// Gaussian clusters whose centres keep at least `margin` distance from
    /// every in-distribution class mean.
    ShiftedMixture {
        class_means: Vec<Vec<f64>>,
        margin: f64,
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_one")]
        sigma: f64,
        /// Candidate centres are drawn with norm up to
        /// `spread · (max class-mean norm + margin)`.
        #[serde(default = "default_one")]
        spread: f64,
    },
}

impl PoolSpec {
    pub fn kind(&self) -> PoolKind {
        match self {
            Self::Gaussian { .. } => PoolKind::Gaussian,
            Self::Rademacher { .. } => PoolKind::Rademacher,
            Self::Blobs { .. } => PoolKind::Blobs,
            Self::ShiftedMixture { .. } => PoolKind::ShiftedMixture,
        }
    }

    /// Parses a bare kind name with default parameters. Shifted mixtures need
    /// class means and cannot be built from a name alone.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(Self::Gaussian { scale: 1.0 }),
            "rademacher" => Ok(Self::Rademacher { scale: 1.0 }),
            "blobs" => Ok(Self::Blobs {
                width: default_blob_width(),
                low: -1.0,
                high: 1.0,
            }),
            other => Err(DataError::InvalidParameter(format!(
                "unknown pool kind {other:?}"
            ))),
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

const MAX_CENTER_ATTEMPTS: usize = 10_000;

pub fn gen_ood_pool(spec: &PoolSpec, size: usize, dim: usize, seed: u64) -> Result<AuxiliaryPool> {
    if size == 0 || dim == 0 {
        return Err(DataError::InvalidParameter(format!(
            "pool size and dimension must be >= 1, got M={size}, d={dim}"
        )));
    }
    let mut rng = rng_for(seed);
    let mut data = Vec::with_capacity(size * dim);
    let mut centers = Vec::new();
    match spec {
        PoolSpec::Gaussian { scale } => {
            data.extend((0..size * dim).map(|_| scale * normal(&mut rng)));
        }
        PoolSpec::Rademacher { scale } => {
            data.extend(
                (0..size * dim).map(|_| if rng.random::<bool>() { *scale } else { -scale }),
            );
        }
        PoolSpec::Blobs { width, low, high } => {
            if *width == 0 {
                return Err(DataError::InvalidParameter(
                    "blob width must be >= 1".into(),
                ));
            }
            let mut noise = vec![0.0; dim];
            let mut smooth = vec![0.0; dim];
            for _ in 0..size {
                noise.iter_mut().for_each(|v| *v = rng.random::<f64>());
                for (i, s) in smooth.iter_mut().enumerate() {
                    *s = (0..*width).map(|o| noise[(i + o) % dim]).sum::<f64>() / *width as f64;
                }
                let mut sorted = smooth.clone();
                sorted.sort_by(f64::total_cmp);
                let median = sorted[dim / 2];
                data.extend(
                    smooth
                        .iter()
                        .map(|&s| if s >= median { *high } else { *low }),
                );
            }
        }
        PoolSpec::ShiftedMixture {
            class_means,
            margin,
            clusters,
            sigma,
            spread,
        } => {
            if class_means.iter().any(|m| m.len() != dim) {
                return Err(DataError::InvalidParameter(
                    "class means do not match the pool dimension".into(),
                ));
            }
            if *clusters == 0 || !(*margin >= 0.0) || !(*sigma >= 0.0) || !(*spread > 0.0) {
                return Err(DataError::InvalidParameter(
                    "shifted mixture needs clusters >= 1, margin >= 0, sigma >= 0, spread > 0"
                        .into(),
                ));
            }
            let far = class_means
                .iter()
                .map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
                + margin;
            let clear = |c: &[f64]| class_means.iter().all(|m| euclid(c, m) >= *margin);
            for _ in 0..*clusters {
                let mut center = None;
                for _ in 0..MAX_CENTER_ATTEMPTS {
                    let dir = orthonormal_frame(1, dim, &mut rng).remove(0);
                    let r = spread * far * rng.random::<f64>();
                    let c: Vec<f64> = dir.iter().map(|u| u * r).collect();
                    if clear(&c) {
                        center = Some(c);
                        break;
                    }
                }
                // Fallback: a norm of (max mean norm + margin) is always clear.
                let center = center.unwrap_or_else(|| {
                    let dir = orthonormal_frame(1, dim, &mut rng).remove(0);
                    dir.iter().map(|u| u * far).collect()
                });
                centers.push(center);
            }
            for _ in 0..size {
                let c = &centers[rng.random_range(0..centers.len())];
                data.extend(c.iter().map(|m| m + sigma * normal(&mut rng)));
            }
        }
    }
    let features = Matrix::from_vec(size, dim, data).expect("shape");
    let mut pool = AuxiliaryPool::new(features, spec.kind())?;
    pool.centers = centers;
    Ok(pool)
}

/// Reads CIFAR-10 binary batches: per record one label byte then 3072 pixel
/// bytes. Pixels are scaled to `[0, 1]`.
pub fn read_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let name = path.display().to_string();
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Truncated {
                path: name,
                len: bytes.len(),
            });
        }
        for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(DataError::CorruptRecord {
                    path: name,
                    record,
                    label,
                });
            }
            labels.push(label as usize);
            data.extend(chunk[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let features = Matrix::from_vec(labels.len(), CIFAR_PIXELS, data).expect("shape");
    LabeledDataset::new(features, labels, CIFAR_CLASSES)
}

fn write_native<W: Write>(w: &mut W, features: &Matrix, labels: &[usize], k: u32) -> Result<()> {
    let n =
        u32::try_from(features.rows()).map_err(|_| DataError::Format("too many rows".into()))?;
    let d = u32::try_from(features.cols())
        .map_err(|_| DataError::Format("dimension too large".into()))?;
    let mut buf = Vec::with_capacity(17 + features.as_slice().len() * 8 + labels.len() * 4);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&k.to_le_bytes());
    for v in features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct NativeRecord {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::Format(format!("short read in {what}")),
        _ => DataError::Io(e),
    })
}

fn read_native<R: Read>(r: &mut R) -> Result<NativeRecord> {
    let mut header = [0u8; 17];
    read_exact_or_format(r, &mut header, "header")?;
    if &header[..5] != DATASET_MAGIC {
        return Err(DataError::Format("bad magic, expected OSDS1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
    let (n, d, k) = (u32_at(5), u32_at(9), u32_at(13));
    if d == 0 {
        return Err(DataError::Format("feature dimension is zero".into()));
    }
    let mut body = vec![0u8; n * d * 8];
    read_exact_or_format(r, &mut body, "features")?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut lbuf = vec![0u8; n * 4];
    read_exact_or_format(r, &mut lbuf, "labels")?;
    let labels: Vec<usize> = lbuf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DataError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(NativeRecord {
        features: Matrix::from_vec(n, d, data).expect("shape"),
        labels,
        num_classes: k,
    })
}

/// Writes the native `OSDS1` format.
pub fn write_dataset<P: AsRef<Path>>(dataset: &LabeledDataset, path: P) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_native(
        &mut f,
        dataset.features(),
        dataset.labels(),
        dataset.num_classes() as u32,
    )?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset<P: AsRef<Path>>(path: P) -> Result<LabeledDataset> {
    let rec = read_native(&mut io::BufReader::new(fs::File::open(path)?))?;
    if rec.num_classes == 0 {
        return Err(DataError::Format(
            "file holds an unlabelled pool (K = 0)".into(),
        ));
    }
    LabeledDataset::new(rec.features, rec.labels, rec.num_classes)
        .map_err(|e| DataError::Format(e.to_string()))
}

/// Pools use the dataset format with `K = 0` and all-zero labels.
pub fn write_pool<P: AsRef<Path>>(pool: &AuxiliaryPool, path: P) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_native(&mut f, pool.features(), &vec![0; pool.len()], 0)?;
    f.flush()?;
    Ok(())
}

/// Reads a pool file. Labelled dataset files are accepted too; their labels
/// are dropped.
pub fn read_pool<P: AsRef<Path>>(path: P) -> Result<AuxiliaryPool> {
    let rec = read_native(&mut io::BufReader::new(fs::File::open(path)?))?;
    AuxiliaryPool::new(rec.features, PoolKind::File)
}
