//! Image datasets: CIFAR-10 binary batches, a deterministic synthetic
//! generator, validation splitting and training-time augmentation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by a 3x32x32 channel-major image.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

/// Environment variable naming the directory that holds the CIFAR-10 binaries.
pub const DATA_ROOT_ENV: &str = "CHOICENET_DATA_ROOT";

/// One image `[C, H, W]` with raw values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// Parse CIFAR-10 binary records, scaling pixels to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Vec<Sample>> {
    let fmt_err = |message: String| Error::Format { path: path.to_path_buf(), message };
    if bytes.is_empty() {
        return Err(fmt_err("empty file".into()));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(fmt_err(format!(
            "truncated: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(fmt_err(format!("record {i}: label {label} outside 0..{CIFAR_CLASSES}")));
            }
            let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(Sample { image: Tensor::from_vec(vec![CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], pixels)?, label })
        })
        .collect()
}

pub fn load_cifar10_binary(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    parse_cifar10(&bytes, path)
}

/// Load and concatenate several batch files in order.
pub fn load_cifar10_files(paths: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_cifar10_binary(p)?);
    }
    Ok(out)
}

/// Write samples in the CIFAR-10 binary layout (pixels rounded to bytes).
pub fn write_cifar10_binary(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * CIFAR_RECORD);
    for s in samples {
        if s.image.dims() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] {
            return Err(Error::InvalidShape(format!("CIFAR image must be 3x32x32, got {}", s.image.shape())));
        }
        if s.label >= CIFAR_CLASSES {
            return Err(Error::InvalidLabel { label: s.label, classes: CIFAR_CLASSES });
        }
        buf.push(s.label as u8);
        buf.extend(s.image.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Standard CIFAR-10 file names inside the data root.
pub fn cifar10_train_files(root: &Path) -> Vec<PathBuf> {
    (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect()
}

pub fn cifar10_test_file(root: &Path) -> PathBuf {
    root.join("test_batch.bin")
}

/// Shuffle with `seed` and move the last `n_val` samples to a validation set.
pub fn split_validation(mut samples: Vec<Sample>, n_val: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n_val > 0 && n_val >= samples.len() {
        return Err(Error::Config(format!("validation size {n_val} leaves no training samples out of {}", samples.len())));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = samples.split_off(samples.len() - n_val);
    Ok((samples, val))
}

/// Take the first `n` samples per a seeded shuffle (for desk-scale subsets).
pub fn subset(mut samples: Vec<Sample>, n: usize, seed: u64) -> Vec<Sample> {
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    samples.truncate(n);
    samples
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Channel mean and (population) standard deviation over `samples`.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyInput("normalization statistics"))?;
        let channels = first.image.dims()[0];
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut count = 0usize;
        for s in samples {
            let plane = s.image.numel() / channels;
            for (c, chunk) in s.image.data().chunks(plane).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
            count += plane;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8)).collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, image: &mut Tensor) {
        let channels = self.mean.len();
        let plane = image.numel() / channels;
        for (c, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }
}

/// Train/validation/test splits sharing normalization statistics computed
/// from the training images only.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub norm: Normalization,
    pub classes: usize,
}

impl DatasetSplit {
    pub fn new(train: Vec<Sample>, val: Vec<Sample>, test: Vec<Sample>, classes: usize) -> Result<Self> {
        let norm = Normalization::fit(&train)?;
        Ok(DatasetSplit { train, val, test, norm, classes })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub flip: bool,
    /// Zero padding added on every side before the random crop; 0 disables cropping.
    pub pad: usize,
}

impl AugmentationPolicy {
    /// Horizontal flip with probability 0.5 and 4-pixel pad-and-crop.
    pub const STANDARD: AugmentationPolicy = AugmentationPolicy { flip: true, pad: 4 };
    pub const NONE: AugmentationPolicy = AugmentationPolicy { flip: false, pad: 0 };
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Deterministic part of augmentation on a `[C, H, W]` image: optional
/// horizontal flip, then a crop of the original size at `(offset_y, offset_x)`
/// from the image zero-padded by `pad` on every side.
pub fn flip_pad_crop(image: &Tensor, flip: bool, pad: usize, offset_y: usize, offset_x: usize) -> Result<Tensor> {
    let dims = image.dims();
    if dims.len() != 3 {
        return Err(Error::InvalidShape(format!("augmentation expects [C, H, W], got {}", image.shape())));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if offset_y > 2 * pad || offset_x > 2 * pad {
        return Err(Error::InvalidShape(format!("crop offset ({offset_y}, {offset_x}) outside padding {pad}")));
    }
    let (dy, dx, p) = (offset_y as isize, offset_x as isize, pad as isize);
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy - p;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx - p;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx];
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Random flip (p = 0.5) and random pad-and-crop of a raw image, with
/// normalization applied before padding so padded pixels sit at the
/// channel mean (zero after normalization).
pub fn augment<R: Rng + ?Sized>(image: &Tensor, policy: AugmentationPolicy, norm: &Normalization, rng: &mut R) -> Result<Tensor> {
    let flip = policy.flip && rng.gen_bool(0.5);
    let (oy, ox) = if policy.pad > 0 {
        (rng.gen_range(0..=2 * policy.pad), rng.gen_range(0..=2 * policy.pad))
    } else {
        (0, 0)
    };
    let mut normalized = image.clone();
    norm.apply(&mut normalized);
    flip_pad_crop(&normalized, flip, policy.pad, oy, ox)
}

/// Stack normalized images into an `[N, C, H, W]` batch with labels.
pub fn collate(samples: &[&Sample], norm: &Normalization) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let mut t = s.image.clone();
            norm.apply(&mut t);
            t
        })
        .collect();
    Ok((Tensor::stack(&images)?, samples.iter().map(|s| s.label).collect()))
}

/// Deterministic class-conditional images: each class is an oriented
/// sinusoidal grating with its own frequency, phase and colour tint, plus
/// Gaussian pixel noise. Labels cycle `i % classes`, so classes are balanced.
pub fn generate_synthetic(n: usize, classes: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    if classes == 0 || resolution == 0 {
        return Err(Error::Config("synthetic data needs classes >= 1 and resolution >= 1".into()));
    }
    // class structure is fixed across seeds; only noise and jitter vary
    let mut class_rng = ChaCha8Rng::seed_from_u64(0xC1A55);
    let protos: Vec<(f64, f64, f64, [f64; 3])> = (0..classes)
        .map(|k| {
            let angle = std::f64::consts::PI * k as f64 / classes as f64;
            let freq = 1.0 + (k % 3) as f64;
            let phase = class_rng.gen_range(0.0..std::f64::consts::TAU);
            let tint = [class_rng.gen_range(0.2..1.0), class_rng.gen_range(0.2..1.0), class_rng.gen_range(0.2..1.0)];
            (angle, freq, phase, tint)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let r = resolution as f64;
    (0..n)
        .map(|i| {
            let label = i % classes;
            let (angle, freq, phase, tint) = protos[label];
            let (s, c) = angle.sin_cos();
            let jitter = rng.gen_range(-0.3..0.3);
            let mut data = Vec::with_capacity(3 * resolution * resolution);
            for tint_c in tint {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let u = (x as f64 * c + y as f64 * s) / r;
                        let g = 0.5 + 0.4 * (std::f64::consts::TAU * freq * u + phase + jitter).sin() * tint_c;
                        data.push((g + noise.sample(&mut rng)).clamp(0.0, 1.0));
                    }
                }
            }
            Ok(Sample { image: Tensor::from_vec(vec![3, resolution, resolution], data)?, label })
        })
        .collect()
}
