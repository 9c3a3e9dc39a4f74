//! Datasets: a seeded synthetic sequence task and raw labelled image records.

use std::path::{Path, PathBuf};

use exdrop_core::rng::stream;
use exdrop_core::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, HarnessError, Result};

const MEANS_STREAM: u64 = 0x10;
const POOL_STREAM: u64 = 0x11;
const TEST_STREAM: u64 = 0x12;
const SPLIT_STREAM: u64 = 0x13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SyntheticSeq(SyntheticSpec),
    BinaryImage(ImageSpec),
}

/// Sequences of Gaussian tokens scattered around a per-class mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    #[serde(default = "default_tokens")]
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Size of the pool that is split into train and validation.
    #[serde(default = "default_records")]
    pub records: usize,
    #[serde(default = "default_test_records")]
    pub test_records: usize,
    /// Norm of each class mean; token noise has unit variance per feature.
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Fixes the data independently of the run seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Fixed-size records of one label byte followed by `channels x height x
/// width` pixel bytes (channel-planar), cut into square patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    /// Pool split into train and validation.
    pub path: PathBuf,
    pub test_path: PathBuf,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_image_classes")]
    pub classes: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_tokens() -> usize {
    8
}
fn default_classes() -> usize {
    2
}
fn default_records() -> usize {
    2000
}
fn default_test_records() -> usize {
    1000
}
fn default_signal() -> f64 {
    1.0
}
fn default_train_fraction() -> f64 {
    0.7
}
fn default_side() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_patch() -> usize {
    8
}
fn default_image_classes() -> usize {
    10
}

impl ImageSpec {
    pub fn record_len(&self) -> usize {
        1 + self.channels * self.height * self.width
    }
}

impl DatasetSpec {
    pub fn tokens(&self) -> usize {
        match self {
            DatasetSpec::SyntheticSeq(s) => s.tokens,
            DatasetSpec::BinaryImage(s) => (s.height / s.patch) * (s.width / s.patch),
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            DatasetSpec::SyntheticSeq(s) => s.dim,
            DatasetSpec::BinaryImage(s) => s.channels * s.patch * s.patch,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticSeq(s) => s.classes,
            DatasetSpec::BinaryImage(s) => s.classes,
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            DatasetSpec::SyntheticSeq(s) => s.seed,
            DatasetSpec::BinaryImage(s) => s.seed,
        }
    }

    pub(crate) fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::BinaryImage(s) = self {
            for p in [&mut s.path, &mut s.test_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::SyntheticSeq(s) => {
                for (field, v) in [
                    ("dataset.tokens", s.tokens),
                    ("dataset.dim", s.dim),
                    ("dataset.records", s.records),
                    ("dataset.test_records", s.test_records),
                ] {
                    if v == 0 {
                        return Err(invalid(field, "must be positive"));
                    }
                }
                if s.classes < 2 {
                    return Err(invalid("dataset.classes", "needs at least two classes"));
                }
                if !(s.signal.is_finite() && s.signal >= 0.0) {
                    return Err(invalid("dataset.signal", "must be finite and nonnegative"));
                }
                check_fraction(s.train_fraction, s.records)
            }
            DatasetSpec::BinaryImage(s) => {
                for (field, v) in [
                    ("dataset.height", s.height),
                    ("dataset.width", s.width),
                    ("dataset.channels", s.channels),
                    ("dataset.patch", s.patch),
                ] {
                    if v == 0 {
                        return Err(invalid(field, "must be positive"));
                    }
                }
                if s.height % s.patch != 0 || s.width % s.patch != 0 {
                    return Err(invalid("dataset.patch", "must divide the image height and width"));
                }
                if !(2..=256).contains(&s.classes) {
                    return Err(invalid("dataset.classes", "must be between 2 and 256"));
                }
                check_fraction(s.train_fraction, 2)
            }
        }
    }
}

fn check_fraction(f: f64, records: usize) -> Result<()> {
    if !(f > 0.0 && f < 1.0) {
        return Err(invalid("dataset.train_fraction", "must lie strictly between 0 and 1"));
    }
    let n_train = split_point(records, f);
    if n_train == 0 || n_train == records {
        return Err(invalid("dataset.train_fraction", "leaves an empty train or validation split"));
    }
    Ok(())
}

/// One labelled sequence (`tokens x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tokens: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

fn split_point(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

/// Shuffles `pool` with `seed` and splits it `fraction : 1 - fraction`.
pub fn split(mut pool: Vec<Record>, fraction: f64, seed: u64) -> (Vec<Record>, Vec<Record>) {
    pool.shuffle(&mut stream(seed, SPLIT_STREAM));
    let val = pool.split_off(split_point(pool.len(), fraction));
    (pool, val)
}

/// Loads or generates the dataset. The dataset's own `seed` wins over
/// `seed` when present.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let seed = spec.seed().unwrap_or(seed);
    let (pool, test, fraction) = match spec {
        DatasetSpec::SyntheticSeq(s) => {
            let means = class_means(s, seed);
            let pool = synthetic_records(s, &means, s.records, &mut stream(seed, POOL_STREAM));
            let test = synthetic_records(s, &means, s.test_records, &mut stream(seed, TEST_STREAM));
            (pool, test, s.train_fraction)
        }
        DatasetSpec::BinaryImage(s) => (read_images(s, &s.path)?, read_images(s, &s.test_path)?, s.train_fraction),
    };
    if pool.len() < 2 {
        return Err(invalid("dataset", "the train pool needs at least two records"));
    }
    let (train, val) = split(pool, fraction, seed);
    Ok(Dataset { train, val, test })
}

fn class_means(s: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, MEANS_STREAM);
    (0..s.classes)
        .map(|_| {
            let v: Vec<f64> = (0..s.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * s.signal / norm).collect()
        })
        .collect()
}

fn synthetic_records(s: &SyntheticSpec, means: &[Vec<f64>], n: usize, rng: &mut impl Rng) -> Vec<Record> {
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..s.classes);
            let mean = &means[label];
            let tokens = Matrix::from_fn(s.tokens, s.dim, |_, j| mean[j] + rng.sample::<f64, _>(StandardNormal));
            Record { tokens, label }
        })
        .collect()
}

/// Cuts one channel-planar image into `patch x patch` tokens, row-major over
/// the patch grid, each token ordered channel, row, column and scaled to
/// `[0, 1]`.
pub fn patchify(pixels: &[u8], s: &ImageSpec) -> Matrix {
    let (gh, gw, p) = (s.height / s.patch, s.width / s.patch, s.patch);
    Matrix::from_fn(gh * gw, s.channels * p * p, |t, f| {
        let (py, px) = (t / gw, t % gw);
        let (c, rest) = (f / (p * p), f % (p * p));
        let (dy, dx) = (rest / p, rest % p);
        let (y, x) = (py * p + dy, px * p + dx);
        f64::from(pixels[c * s.height * s.width + y * s.width + x]) / 255.0
    })
}

fn read_images(s: &ImageSpec, path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let len = s.record_len();
    if bytes.is_empty() || bytes.len() % len != 0 {
        return Err(HarnessError::Ingestion {
            path: path.to_owned(),
            reason: format!("{} bytes is not a positive multiple of the {len}-byte record", bytes.len()),
        });
    }
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, rec)| {
            let label = usize::from(rec[0]);
            if label >= s.classes {
                return Err(HarnessError::Ingestion {
                    path: path.to_owned(),
                    reason: format!("record {i} has label {label} but there are {} classes", s.classes),
                });
            }
            Ok(Record {
                tokens: patchify(&rec[1..], s),
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(records: usize, signal: f64) -> DatasetSpec {
        DatasetSpec::SyntheticSeq(SyntheticSpec {
            tokens: 6,
            dim: 4,
            classes: 2,
            records,
            test_records: 400,
            signal,
            train_fraction: 0.7,
            seed: None,
        })
    }

    #[test]
    fn split_sizes() {
        let d = load_dataset(&synthetic(1000, 1.0), 3).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (700, 300, 400));
    }

    #[test]
    fn same_seed_same_splits() {
        let a = load_dataset(&synthetic(200, 1.0), 5).unwrap();
        assert_eq!(a, load_dataset(&synthetic(200, 1.0), 5).unwrap());
        assert_ne!(a.train, load_dataset(&synthetic(200, 1.0), 6).unwrap().train);
    }

    #[test]
    fn mean_pooled_centroid_probe_separates_high_snr_classes() {
        let d = load_dataset(&synthetic(1000, 3.0), 7).unwrap();
        let pooled = |r: &Record| -> Vec<f64> {
            (0..4).map(|j| (0..6).map(|i| r.tokens[(i, j)]).sum::<f64>() / 6.0).collect()
        };
        // Fit class centroids on train; nearest centroid is a linear rule for two classes.
        let mut centroids = vec![vec![0.0; 4]; 2];
        let mut counts = [0.0; 2];
        for r in &d.train {
            for (c, v) in centroids[r.label].iter_mut().zip(pooled(r)) {
                *c += v;
            }
            counts[r.label] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = d
            .test
            .iter()
            .filter(|r| {
                let v = pooled(r);
                let guess = usize::from(dist(&v, &centroids[1]) < dist(&v, &centroids[0]));
                guess == r.label
            })
            .count();
        assert!(correct as f64 / d.test.len() as f64 > 0.95);
    }

    fn image_spec(dir: &Path) -> ImageSpec {
        ImageSpec {
            path: dir.join("train.bin"),
            test_path: dir.join("test.bin"),
            height: 4,
            width: 4,
            channels: 2,
            patch: 2,
            classes: 3,
            train_fraction: 0.7,
            seed: None,
        }
    }

    #[test]
    fn patches_follow_the_documented_layout() {
        let s = image_spec(Path::new("."));
        let pixels: Vec<u8> = (0..32).collect();
        let m = patchify(&pixels, &s);
        assert_eq!(m.shape(), (4, 8));
        // Token 1 is the top-right patch; feature 4 is channel 1, row 0, col 0.
        assert_eq!(m[(1, 0)], 2.0 / 255.0);
        assert_eq!(m[(1, 4)], 18.0 / 255.0);
        assert_eq!(m[(3, 3)], 15.0 / 255.0);
    }

    #[test]
    fn image_records_load_and_reject_bad_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let s = image_spec(dir.path());
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.push(i % 3);
            bytes.extend(std::iter::repeat_n(i, 32));
        }
        std::fs::write(&s.path, &bytes).unwrap();
        std::fs::write(&s.test_path, &bytes[..66]).unwrap();
        let d = load_dataset(&DatasetSpec::BinaryImage(s.clone()), 1).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (7, 3, 2));
        assert_eq!(d.test[1].label, 1);

        std::fs::write(&s.test_path, &bytes[..50]).unwrap();
        assert!(matches!(
            load_dataset(&DatasetSpec::BinaryImage(s), 1),
            Err(HarnessError::Ingestion { .. })
        ));
    }
}
