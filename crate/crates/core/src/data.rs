//! Datasets: the CIFAR-10 binary format, synthetic Gaussian blobs, and
//! image augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::tensor::{Batch, Shape, Tensor};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const DATA_DIR_ENV: &str = "PROBE_DATA_DIR";

pub fn cifar_shape() -> Shape {
    Shape::image(3, 32, 32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub classes: usize,
}

impl Dataset {
    pub fn shape(&self) -> Shape {
        self.train.inputs.shape
    }

    /// First `n` training examples after a seeded shuffle.
    pub fn subsample_train(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(idx.len()));
        Dataset { train: self.train.select(&idx), test: self.test.clone(), classes: self.classes }
    }

    /// Reinterprets flat inputs as images (or vice versa) of equal size.
    pub fn reshape(mut self, shape: Shape) -> Result<Dataset> {
        self.train.inputs = self.train.inputs.reshaped(shape)?;
        self.test.inputs = self.test.inputs.reshaped(shape)?;
        Ok(self)
    }

    /// Applies the given normalization using statistics of the training split.
    pub fn normalized(mut self, mode: Normalization) -> Dataset {
        if mode == Normalization::None {
            return self;
        }
        let shape = self.shape();
        let (c, s) = (shape.channels(), shape.spatial());
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let n = self.train.inputs.count;
        for e in 0..n {
            let x = self.train.inputs.example(e);
            for ch in 0..c {
                for v in &x[ch * s..(ch + 1) * s] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let m = (n * s) as f64;
        let std: Vec<f64> = (0..c)
            .map(|ch| {
                mean[ch] /= m;
                (sq[ch] / m - mean[ch] * mean[ch]).max(1e-12).sqrt()
            })
            .collect();
        for t in [&mut self.train.inputs, &mut self.test.inputs] {
            for e in 0..t.count {
                let x = t.example_mut(e);
                for ch in 0..c {
                    for v in &mut x[ch * s..(ch + 1) * s] {
                        *v = (*v - mean[ch]) / std[ch];
                    }
                }
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw pixels in `[0, 1]`.
    #[default]
    None,
    /// Per-channel standardization with training-split statistics.
    PerChannel,
}

/// Parses one CIFAR-10 batch file: records of 1 label byte and 3072 pixel
/// bytes (R, G, B planes, each 32x32 row-major), pixels scaled by 1/255.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Batch> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(ProbeError::Format {
            offset: (whole * CIFAR_RECORD) as u64,
            detail: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(ProbeError::Corrupt {
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label {label} in record {i}"),
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Batch::new(Tensor::new(cifar_shape(), count, data)?, labels, CIFAR_CLASSES)
}

/// Encodes a batch of 3x32x32 images in `[0, 1]` into the binary record format.
pub fn encode_cifar_batch(batch: &Batch) -> Result<Vec<u8>> {
    if batch.inputs.shape != cifar_shape() {
        return Err(ProbeError::Argument(format!(
            "CIFAR records hold {} images, got {}",
            cifar_shape(),
            batch.inputs.shape
        )));
    }
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD);
    for (i, &label) in batch.labels.iter().enumerate() {
        if label >= CIFAR_CLASSES {
            return Err(ProbeError::Argument(format!("label {label} out of range")));
        }
        out.push(label as u8);
        out.extend(
            batch
                .inputs
                .example(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

fn read_batch_file(path: &Path) -> Result<Batch> {
    let bytes = std::fs::read(path)?;
    parse_cifar_batch(&bytes).map_err(|e| match e {
        ProbeError::Format { offset, detail } => ProbeError::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        ProbeError::Corrupt { offset, detail } => ProbeError::Corrupt {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

fn concat(batches: Vec<Batch>) -> Batch {
    let shape = batches[0].inputs.shape;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for b in batches {
        data.extend(b.inputs.data);
        labels.extend(b.labels);
    }
    let count = labels.len();
    Batch { inputs: Tensor { shape, count, data }, labels }
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = CIFAR_TRAIN_FILES
        .iter()
        .map(|f| read_batch_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let test = read_batch_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok(Dataset { train: concat(train), test, classes: CIFAR_CLASSES })
}

/// Dataset root from `PROBE_DATA_DIR`, if set.
pub fn default_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Gaussian-blob classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Distance between class means (single-cluster mode).
    pub separation: f64,
    pub seed: u64,
    /// Blobs per class; more than one makes the classes non-linearly separable.
    #[serde(default = "one")]
    pub clusters_per_class: usize,
    #[serde(default = "unit")]
    pub noise: f64,
    /// Optional image shape of size `dim` to reinterpret inputs as.
    #[serde(default)]
    pub image: Option<Shape>,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn blobs(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Self {
        Self {
            classes,
            dim,
            per_class,
            separation,
            seed,
            clusters_per_class: 1,
            noise: 1.0,
            image: None,
        }
    }
}

/// Draws blobs and splits each class 80/20 into train and test.
///
/// With one cluster per class, class means sit at pairwise distance
/// `separation` (scaled coordinate axes when `dim >= classes`). With several
/// clusters per class, cluster centers are uniform in a cube of side
/// `separation`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(ProbeError::Argument("synthetic data needs at least 2 classes".into()));
    }
    if cfg.dim == 0 || cfg.per_class == 0 || cfg.clusters_per_class == 0 {
        return Err(ProbeError::Argument("dim, per_class and clusters_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clusters = cfg.clusters_per_class;
    let mut centers = vec![vec![0.0; cfg.dim]; cfg.classes * clusters];
    if clusters == 1 {
        let r = cfg.separation / std::f64::consts::SQRT_2;
        for (c, center) in centers.iter_mut().enumerate() {
            if cfg.dim >= cfg.classes {
                center[c] = r;
            } else {
                let mut d: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = crate::linalg::norm(&d);
                d.iter_mut().for_each(|v| *v *= r / n);
                *center = d;
            }
        }
    } else {
        let half = cfg.separation / 2.0;
        for center in centers.iter_mut() {
            center.iter_mut().for_each(|v| *v = rng.random_range(-half..=half));
        }
    }
    // Stratified 80/20 split keeps the class balance of both halves.
    let per_train = (cfg.per_class * 4) / 5;
    let mut train_rows = Vec::with_capacity(cfg.classes * per_train);
    let mut test_rows = Vec::with_capacity(cfg.classes * (cfg.per_class - per_train));
    for c in 0..cfg.classes {
        for i in 0..cfg.per_class {
            let center = &centers[c * clusters + i % clusters];
            let x: Vec<f64> = center
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + cfg.noise * z
                })
                .collect();
            if i < per_train {
                train_rows.push((x, c));
            } else {
                test_rows.push((x, c));
            }
        }
    }
    train_rows.shuffle(&mut rng);
    test_rows.shuffle(&mut rng);
    let split = |part: &[(Vec<f64>, usize)]| -> Result<Batch> {
        let inputs = Tensor::from_rows(&part.iter().map(|(x, _)| x.as_slice()).collect::<Vec<_>>())?;
        Batch::new(inputs, part.iter().map(|(_, y)| *y).collect(), cfg.classes)
    };
    let ds = Dataset {
        train: split(&train_rows)?,
        test: split(&test_rows)?,
        classes: cfg.classes,
    };
    match cfg.image {
        Some(shape) => ds.reshape(shape),
        None => Ok(ds),
    }
}

/// Random crop (zero padding `padding`) and horizontal flip with probability 0.5.
pub fn augment(batch: &Batch, padding: usize, rng: &mut impl Rng) -> Batch {
    let Shape::Image { channels, height, width } = batch.inputs.shape else {
        return batch.clone();
    };
    let mut out = batch.clone();
    for e in 0..batch.len() {
        let dy = rng.random_range(0..=2 * padding) as isize - padding as isize;
        let dx = rng.random_range(0..=2 * padding) as isize - padding as isize;
        let flip = rng.random_bool(0.5);
        let src = batch.inputs.example(e);
        let dst = out.inputs.example_mut(e);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let sx0 = if flip { width - 1 - x } else { x };
                    let sy = y as isize + dy;
                    let sx = sx0 as isize + dx;
                    dst[(c * height + y) * width + x] =
                        if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                            0.0
                        } else {
                            src[(c * height + sy as usize) * width + sx as usize]
                        };
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(count: usize) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(count * CIFAR_RECORD);
        for i in 0..count {
            bytes.push((i % 10) as u8);
            bytes.extend((0..3072).map(|j| ((i * 7 + j) % 256) as u8));
        }
        bytes
    }

    #[test]
    fn record_count_follows_file_size() {
        assert_eq!(3073 * 10000, 30_730_000);
        let b = parse_cifar_batch(&fixture(12)).unwrap();
        assert_eq!(b.len(), 12);
    }

    #[test]
    fn pixels_are_bytes_over_255_in_plane_order() {
        let bytes = fixture(2);
        let b = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(b.labels, vec![0, 1]);
        let x = b.inputs.example(1);
        // green plane, row 3, column 5
        let j = 1024 + 3 * 32 + 5;
        assert_eq!(x[j], bytes[CIFAR_RECORD + 1 + j] as f64 / 255.0);
        assert_eq!(x[j], ((7 + j) % 256) as f64 / 255.0);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = fixture(3);
        match parse_cifar_batch(&bytes[..bytes.len() - 10]) {
            Err(ProbeError::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_is_corruption() {
        let mut bytes = fixture(3);
        bytes[CIFAR_RECORD] = 10;
        assert!(matches!(
            parse_cifar_batch(&bytes),
            Err(ProbeError::Corrupt { offset, .. }) if offset == CIFAR_RECORD as u64
        ));
    }

    #[test]
    fn encode_parse_round_trips_bitwise() {
        let bytes = fixture(4);
        let b = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(encode_cifar_batch(&b).unwrap(), bytes);
        let again = parse_cifar_batch(&encode_cifar_batch(&b).unwrap()).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn synth_is_deterministic_and_split() {
        let cfg = SynthConfig::blobs(3, 5, 20, 4.0, 9);
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 48);
        assert_eq!(a.test.len(), 12);
        let c = synth_dataset(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_needs_two_classes() {
        assert!(synth_dataset(&SynthConfig::blobs(1, 2, 5, 1.0, 0)).is_err());
    }

    #[test]
    fn flip_without_padding_mirrors_rows() {
        let inputs = Tensor::new(Shape::image(1, 1, 3), 1, vec![1.0, 2.0, 3.0]).unwrap();
        let batch = Batch::new(inputs, vec![0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen_flip = false;
        for _ in 0..20 {
            let out = augment(&batch, 0, &mut rng);
            let d = &out.inputs.data;
            assert!(d == &[1.0, 2.0, 3.0] || d == &[3.0, 2.0, 1.0]);
            seen_flip |= d[0] == 3.0;
        }
        assert!(seen_flip);
    }

    #[test]
    fn per_channel_normalization_standardizes_train() {
        let ds = synth_dataset(&SynthConfig::blobs(2, 4, 50, 3.0, 1)).unwrap();
        let n = ds.normalized(Normalization::PerChannel);
        for f in 0..4 {
            let vals: Vec<f64> = (0..n.train.len()).map(|e| n.train.inputs.example(e)[f]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
