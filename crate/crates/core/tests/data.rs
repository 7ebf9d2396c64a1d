use choicenet::data::{
    augment, flip_pad_crop, generate_synthetic, load_cifar10_binary, split_validation, write_cifar10_binary,
    AugmentationPolicy, DatasetSplit, Normalization, Sample, CIFAR_RECORD,
};
use choicenet::{Error, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn byte_exact_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pixels = (0..3072).map(|_| rng.gen_range(0u8..=255) as f64 / 255.0).collect();
            Sample { image: Tensor::from_vec(vec![3, 32, 32], pixels).unwrap(), label: i % 10 }
        })
        .collect()
}

#[test]
fn binary_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    let samples = byte_exact_samples(13, 1);
    write_cifar10_binary(&path, &samples).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 13 * CIFAR_RECORD);
    assert_eq!(load_cifar10_binary(&path).unwrap(), samples);
}

#[test]
fn two_records_and_saturated_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.bin");
    let mut bytes = vec![255u8; 2 * CIFAR_RECORD];
    bytes[0] = 3;
    bytes[CIFAR_RECORD] = 7;
    std::fs::write(&path, &bytes).unwrap();
    let s = load_cifar10_binary(&path).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!((s[0].label, s[1].label), (3, 7));
    assert!(s.iter().all(|x| x.image.dims() == [3, 32, 32] && x.image.data().iter().all(|&v| v == 1.0)));

    std::fs::write(&path, &bytes[..CIFAR_RECORD + 10]).unwrap();
    assert!(matches!(load_cifar10_binary(&path), Err(Error::Format { .. })));
    assert!(load_cifar10_binary(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn splits_are_disjoint_and_normalization_uses_train_only() {
    let all = generate_synthetic(100, 4, 8, 3).unwrap();
    let (train, val) = split_validation(all.clone(), 20, 9).unwrap();
    assert_eq!((train.len(), val.len()), (80, 20));
    let test = generate_synthetic(10, 4, 8, 4).unwrap();
    let split = DatasetSplit::new(train.clone(), val.clone(), test, 4).unwrap();
    assert_eq!(split.norm, Normalization::fit(&train).unwrap());
    assert_ne!(split.norm, Normalization::fit(&all).unwrap());
    // every original sample lands in exactly one split
    let mut seen: Vec<&Sample> = train.iter().chain(&val).collect();
    assert_eq!(seen.len(), all.len());
    for s in &all {
        let pos = seen.iter().position(|t| *t == s).expect("sample lost by split");
        seen.swap_remove(pos);
    }
}

#[test]
fn synthetic_set_is_balanced_and_reproducible() {
    let a = generate_synthetic(64, 4, 8, 11).unwrap();
    for k in 0..4 {
        assert_eq!(a.iter().filter(|s| s.label == k).count(), 16);
    }
    assert_eq!(a, generate_synthetic(64, 4, 8, 11).unwrap());
}

/// Least-squares one-vs-all probe on raw pixels, fit on one seed and scored on another.
#[test]
fn linear_probe_beats_chance() {
    let (classes, res) = (4, 8);
    let features = |s: &[Sample]| {
        DMatrix::from_fn(s.len(), 3 * res * res + 1, |i, j| if j == 3 * res * res { 1.0 } else { s[i].image.data()[j] })
    };
    let train = generate_synthetic(256, classes, res, 1).unwrap();
    let test = generate_synthetic(128, classes, res, 2).unwrap();
    let x = features(&train);
    let y = DMatrix::from_fn(train.len(), classes, |i, k| if train[i].label == k { 1.0 } else { 0.0 });
    let gram = x.transpose() * &x + DMatrix::identity(x.ncols(), x.ncols()) * 1e-3;
    let w = gram.cholesky().expect("ridge system is positive definite").solve(&(x.transpose() * y));
    let scores = features(&test) * w;
    let correct = (0..test.len()).filter(|&i| scores.row(i).transpose().argmax().0 == test[i].label).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.5, "probe accuracy {acc} is not clearly above chance 0.25");
}

#[test]
fn centred_crop_without_flip_is_identity_and_flip_is_an_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::rand_uniform(vec![3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
    assert_eq!(flip_pad_crop(&img, false, 4, 4, 4).unwrap(), img);
    let once = flip_pad_crop(&img, true, 0, 0, 0).unwrap();
    assert_ne!(once, img);
    assert_eq!(flip_pad_crop(&once, true, 0, 0, 0).unwrap(), img);
    // shifting by one pixel moves content and zero-fills the border
    let shifted = flip_pad_crop(&img, false, 4, 4, 5).unwrap();
    assert_eq!(shifted.at4_chw(0, 0, 0), img.at4_chw(0, 0, 1));
    assert_eq!(shifted.at4_chw(0, 0, 31), 0.0);
}

trait Chw {
    fn at4_chw(&self, c: usize, y: usize, x: usize) -> f64;
}

impl Chw for Tensor {
    fn at4_chw(&self, c: usize, y: usize, x: usize) -> f64 {
        let d = self.dims();
        self.data()[(c * d[1] + y) * d[2] + x]
    }
}

fn channel_moments(values: &[Vec<f64>]) -> Vec<(f64, f64)> {
    values
        .iter()
        .map(|v| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Over 10,000 augmented draws the normalized pixels have channel mean 0 and
/// standard deviation 1 within 0.05. Padded border pixels are exactly zero
/// (the channel mean), so the deviation is measured on image pixels.
#[test]
fn augmented_statistics_are_standardized() {
    let train = generate_synthetic(500, 10, 32, 21).unwrap();
    let norm = Normalization::fit(&train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut all = vec![Vec::new(); 3];
    let mut image_pixels = vec![Vec::new(); 3];
    for draw in 0..10_000 {
        let s = &train[draw % train.len()];
        // replaying the same draws on an all-ones image marks which output pixels came from the image
        let mut mask_rng = rng.clone();
        let out = augment(&s.image, AugmentationPolicy::STANDARD, &norm, &mut rng).unwrap();
        assert_eq!(out.dims(), s.image.dims());
        let mask = augment(&Tensor::ones(vec![3, 32, 32]).unwrap(), AugmentationPolicy::STANDARD, &unit_norm(), &mut mask_rng)
            .unwrap();
        for c in 0..3 {
            for i in 0..1024 {
                let v = out.data()[c * 1024 + i];
                all[c].push(v);
                if mask.data()[c * 1024 + i] != 0.0 {
                    image_pixels[c].push(v);
                }
            }
        }
    }
    for (c, (mean, _)) in channel_moments(&all).into_iter().enumerate() {
        assert!(mean.abs() < 0.05, "channel {c} mean {mean}");
    }
    for (c, (mean, std)) in channel_moments(&image_pixels).into_iter().enumerate() {
        assert!(mean.abs() < 0.05, "channel {c} image-pixel mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "channel {c} image-pixel std {std}");
    }
}

fn unit_norm() -> Normalization {
    Normalization { mean: vec![0.0; 3], std: vec![1.0; 3] }
}

#[test]
fn flip_only_statistics_are_standardized() {
    let train = generate_synthetic(200, 10, 32, 2).unwrap();
    let norm = Normalization::fit(&train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut all = vec![Vec::new(); 3];
    for draw in 0..10_000 {
        let s = &train[draw % train.len()];
        let out = augment(&s.image, AugmentationPolicy { flip: true, pad: 0 }, &norm, &mut rng).unwrap();
        for c in 0..3 {
            all[c].extend_from_slice(&out.data()[c * 1024..(c + 1) * 1024]);
        }
    }
    for (c, (mean, std)) in channel_moments(&all).into_iter().enumerate() {
        assert!(mean.abs() < 0.05 && (std - 1.0).abs() < 0.05, "channel {c}: mean {mean} std {std}");
    }
}
