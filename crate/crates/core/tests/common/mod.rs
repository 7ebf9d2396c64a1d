//! Shared fixtures for the integration and acceptance tests: brute-force
//! kernel oracles, random model configurations and small training helpers.
#![allow(dead_code)]

use choicenet::arch::{ArchKind, ModelConfig, SkipMode};
use choicenet::layers::PoolMode;
use choicenet::Tensor;
use rand::Rng;

/// Direct seven-loop convolution with zero padding.
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(ni, ci, iy as usize, ix as usize) * w.at4(oi, ci, ky, kx);
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, o, oh, ow], out).unwrap()
}

/// Brute-force convolution gradients `(d input, d weight, d bias)` by
/// scattering every output gradient back through its receptive field.
pub fn conv_backward_oracle(go: &Tensor, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let (oh, ow) = (go.dims()[2], go.dims()[3]);
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; o];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let g = go.at4(ni, oi, y, xo);
                    gb[oi] += g;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                gx[((ni * c + ci) * h + iy) * wd + ix] += g * w.at4(oi, ci, ky, kx);
                                gw[((oi * c + ci) * k + ky) * k + kx] += g * x.at4(ni, ci, iy, ix);
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.dims().to_vec(), gx).unwrap(),
        Tensor::from_vec(w.dims().to_vec(), gw).unwrap(),
        Tensor::from_vec(vec![o], gb).unwrap(),
    )
}

/// 2x2 / stride-2 window scan returning `(max, mean)` outputs.
pub fn pool_oracle(x: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut mx = Vec::new();
    let mut av = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let window = [
                        x.at4(ni, ci, 2 * y, 2 * xo),
                        x.at4(ni, ci, 2 * y, 2 * xo + 1),
                        x.at4(ni, ci, 2 * y + 1, 2 * xo),
                        x.at4(ni, ci, 2 * y + 1, 2 * xo + 1),
                    ];
                    mx.push(window.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                    av.push(window.iter().sum::<f64>() / 4.0);
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![n, c, oh, ow], mx).unwrap(),
        Tensor::from_vec(vec![n, c, oh, ow], av).unwrap(),
    )
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

/// A random shipped-style model configuration small enough to build quickly.
pub fn random_model_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let arch = match rng.gen_range(0..6) {
        0 => ArchKind::ResNet,
        1 => ArchKind::DenseNet,
        _ => ArchKind::ChoiceNet,
    };
    let mut cfg: ModelConfig = toml::from_str(include_str!("../../configs/models/choicenet-tiny.toml")).unwrap();
    cfg.arch = arch;
    cfg.in_channels = rng.gen_range(1..=3);
    cfg.resolution = 4 * rng.gen_range(1..=3);
    cfg.num_classes = rng.gen_range(2..=6);
    cfg.stem_channels = rng.gen_range(2..=8);
    cfg.stem_kernel = [1, 3, 5][rng.gen_range(0..3)];
    cfg.pooling = [PoolMode::Max, PoolMode::Avg, PoolMode::Both][rng.gen_range(0..3)];
    cfg.transitions = if rng.gen_bool(0.5) { vec![rng.gen_range(2..=8), rng.gen_range(2..=8)] } else { vec![] };
    cfg.conv_bias = rng.gen_bool(0.3);
    cfg.modules_per_block = rng.gen_range(1..=3);
    cfg.skip_mode = if rng.gen_bool(0.5) { SkipMode::Chain } else { SkipMode::PerConv };
    cfg.share_branch_weights = rng.gen_bool(0.5);
    cfg.skip_projection = rng.gen_bool(0.5);
    cfg.bottleneck_channels = (0..3).map(|_| rng.gen_range(1..=4)).collect();
    cfg.branch_channels = cfg
        .bottleneck_channels
        .iter()
        .map(|&cb| if cfg.skip_projection { rng.gen_range(1..=4) } else { cb })
        .collect();
    cfg.units_per_stage = rng.gen_range(1..=2);
    cfg.growth = rng.gen_range(1..=4);
    cfg.validate().unwrap_or_else(|e| panic!("generated invalid config {cfg:?}: {e}"));
    cfg
}
