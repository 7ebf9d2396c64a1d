//! Per-channel batch normalization over `N, H, W`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Values saved by the forward pass for the backward rule.
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    /// Normalized input, same shape as the input.
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per channel, where `var` is the batch or running variance.
    pub inv_std: Vec<f64>,
    /// Whether batch statistics were used.
    pub training: bool,
}

/// Batch statistics of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by `N*H*W`).
    pub var: Vec<f64>,
    /// Number of reduced elements per channel.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(RunningStats { mean: Tensor::zeros(vec![channels])?, var: Tensor::ones(vec![channels])? })
    }

    /// Exponential moving average toward the batch statistics. The running
    /// variance tracks the unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (rm, &m) in self.mean.data_mut().iter_mut().zip(&stats.mean) {
            *rm = (1.0 - momentum) * *rm + momentum * m;
        }
        for (rv, &v) in self.var.data_mut().iter_mut().zip(&stats.var) {
            *rv = (1.0 - momentum) * *rv + momentum * v * correction;
        }
    }
}

fn check_params(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.shape().nchw()?;
    for p in [gamma, beta] {
        if p.numel() != c {
            return Err(Error::ChannelMismatch { op: "batchnorm2d", expected: c, actual: p.numel() });
        }
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("batchnorm eps must be > 0, got {eps}")));
    }
    Ok((n, c, h * w))
}

fn normalize(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    (n, c, plane): (usize, usize, usize),
) -> Result<(Tensor, Tensor)> {
    let mut xhat = Tensor::zeros_like(input);
    let mut out = Tensor::zeros_like(input);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let z = (input.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = z;
                out.data_mut()[i] = g * z + bt;
            }
        }
    }
    out.check_finite("batchnorm2d")?;
    Ok((out, xhat))
}

/// Training-mode forward using batch statistics.
pub fn batchnorm2d_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved, BatchStats)> {
    let dims = check_params(input, gamma, beta, eps)?;
    let (n, c, plane) = dims;
    let count = n * plane;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += input.data()[off..off + plane].iter().sum::<f64>();
        }
        mean[ch] = s / count as f64;
        let mut sq = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            sq += input.data()[off..off + plane].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
        }
        var[ch] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (out, xhat) = normalize(input, gamma, beta, &mean, &inv_std, dims)?;
    Ok((out, BatchNormSaved { xhat, inv_std, training: true }, BatchStats { mean, var, count }))
}

/// Eval-mode forward using running statistics.
pub fn batchnorm2d_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved)> {
    let dims = check_params(input, gamma, beta, eps)?;
    if running.mean.numel() != dims.1 || running.var.numel() != dims.1 {
        return Err(Error::ChannelMismatch {
            op: "batchnorm2d running stats",
            expected: dims.1,
            actual: running.mean.numel(),
        });
    }
    let inv_std: Vec<f64> = running.var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (out, xhat) = normalize(input, gamma, beta, running.mean.data(), &inv_std, dims)?;
    Ok((out, BatchNormSaved { xhat, inv_std, training: false }))
}

/// Single entry point: normalizes, and in training mode folds the batch
/// statistics into `running` with the given momentum.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<(Tensor, BatchNormSaved)> {
    if training {
        let (out, saved, stats) = batchnorm2d_train(input, gamma, beta, eps)?;
        running.update(&stats, momentum);
        Ok((out, saved))
    } else {
        batchnorm2d_eval(input, gamma, beta, running, eps)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm2d_backward(grad_out: &Tensor, saved: &BatchNormSaved, gamma: &Tensor) -> Result<BatchNormGrads> {
    grad_out.expect_same_shape(&saved.xhat, "batchnorm2d_backward")?;
    let (n, c, h, w) = grad_out.shape().nchw()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let gy = grad_out.data();
    let xh = saved.xhat.data();

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += gy[i];
                dgamma[ch] += gy[i] * xh[i];
            }
        }
    }
    let mut dx = Tensor::zeros_like(grad_out);
    let d = dx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            if saved.training {
                let (mb, mg) = (dbeta[ch] / count, dgamma[ch] / count);
                for i in off..off + plane {
                    d[i] = scale * (gy[i] - mb - xh[i] * mg);
                }
            } else {
                for i in off..off + plane {
                    d[i] = scale * gy[i];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        beta: Tensor::from_vec(vec![c], dbeta)?,
    })
}
