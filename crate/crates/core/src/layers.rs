//! Parameterized building blocks: composite function (conv-BN-ReLU),
//! bottleneck, pooling, dropout and the classifier head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::norm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::params::{BufferId, Buffers, Forward, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { eps: DEFAULT_EPS, momentum: DEFAULT_MOMENTUM }
    }
}

/// Allocates named parameters and buffers with seeded initialization.
pub struct Builder {
    pub params: ParamStore,
    pub buffers: Buffers,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder { params: ParamStore::new(), buffers: Buffers::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn conv(&mut self, name: &str, in_c: usize, out_c: usize, kernel: usize, bias: bool) -> Result<Conv2d> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        let fan_in = (in_c * kernel * kernel) as f64;
        let w = Tensor::randn(vec![out_c, in_c, kernel, kernel], (2.0 / fan_in).sqrt(), &mut self.rng)?;
        let weight = self.params.add(format!("{name}.weight"), w);
        let bias = if bias {
            Some(self.params.add(format!("{name}.bias"), Tensor::zeros(vec![out_c])?))
        } else {
            None
        };
        Ok(Conv2d { weight, bias, in_channels: in_c, out_channels: out_c, kernel })
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize, cfg: BatchNormConfig) -> Result<BatchNorm2d> {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::ones(vec![channels])?);
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(vec![channels])?);
        let running = self.buffers.add(name, channels)?;
        Ok(BatchNorm2d { gamma, beta, running, channels, cfg })
    }

    /// Weights `N(0, 1/D)`, zero bias.
    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Result<(ParamId, ParamId)> {
        let w = Tensor::randn(vec![in_features, out_features], (1.0 / in_features as f64).sqrt(), &mut self.rng)?;
        let weight = self.params.add(format!("{name}.weight"), w);
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(vec![out_features])?);
        Ok((weight, bias))
    }

    pub fn finish(self) -> (ParamStore, Buffers) {
        (self.params, self.buffers)
    }
}

/// Stride-1 convolution with SAME padding `(K - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.conv2d(x, w, b, 1, (self.kernel - 1) / 2)
    }

    pub fn param_count(in_c: usize, out_c: usize, kernel: usize, bias: bool) -> usize {
        out_c * in_c * kernel * kernel + if bias { out_c } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BufferId,
    pub channels: usize,
    pub cfg: BatchNormConfig,
}

impl BatchNorm2d {
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        f.batchnorm(x, self.gamma, self.beta, self.running, self.cfg.eps, self.cfg.momentum)
    }
}

/// `relu(batchnorm(conv(x)))` with spatial size preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeFunction {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl CompositeFunction {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        bias: bool,
        bn: BatchNormConfig,
    ) -> Result<Self> {
        let conv = b.conv(&format!("{name}.conv"), in_c, out_c, kernel, bias)?;
        let bn = b.batchnorm(&format!("{name}.bn"), out_c, bn)?;
        Ok(CompositeFunction { conv, bn })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.pre_activation(f, x)?;
        f.tape.relu(y)
    }

    /// `batchnorm(conv(x))` without the final ReLU.
    pub fn pre_activation(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let channels = f.tape.value(x).shape().nchw()?.1;
        if channels != self.conv.in_channels {
            return Err(Error::ChannelMismatch {
                op: "composite function",
                expected: self.conv.in_channels,
                actual: channels,
            });
        }
        let y = self.conv.forward(f, x)?;
        self.bn.forward(f, y)
    }

    /// `C_out * C_in * K^2 + 2 * C_out (+ C_out with bias)`.
    pub fn param_count(in_c: usize, out_c: usize, kernel: usize, bias: bool) -> usize {
        Conv2d::param_count(in_c, out_c, kernel, bias) + 2 * out_c
    }

    pub fn kernel(&self) -> usize {
        self.conv.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

/// 1x1 composite function used to shrink channel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck(pub CompositeFunction);

impl Bottleneck {
    pub fn new(b: &mut Builder, name: &str, in_c: usize, out_c: usize, bias: bool, bn: BatchNormConfig) -> Result<Self> {
        Ok(Bottleneck(CompositeFunction::new(b, name, in_c, out_c, 1, bias, bn)?))
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.0.forward(f, x)
    }

    pub fn param_count(in_c: usize, out_c: usize, bias: bool) -> usize {
        CompositeFunction::param_count(in_c, out_c, 1, bias)
    }

    pub fn out_channels(&self) -> usize {
        self.0.out_channels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
    Both,
}

impl PoolMode {
    pub fn out_channels(self, in_channels: usize) -> usize {
        match self {
            PoolMode::Both => 2 * in_channels,
            PoolMode::Max | PoolMode::Avg => in_channels,
        }
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" => Ok(PoolMode::Avg),
            "both" => Ok(PoolMode::Both),
            other => Err(Error::Config(format!("unknown pooling mode `{other}` (expected max, avg or both)"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Avg => "avg",
            PoolMode::Both => "both",
        })
    }
}

/// Max-pool and avg-pool concatenated on channels, max half first.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DualPool;

impl DualPool {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let m = tape.max_pool2(x)?;
        let a = tape.avg_pool2(x)?;
        tape.concat_channels(&[m, a])
    }
}

pub fn pooling_mode_forward(tape: &mut Tape, x: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Max => tape.max_pool2(x),
        PoolMode::Avg => tape.avg_pool2(x),
        PoolMode::Both => DualPool.forward(tape, x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Dropout { p })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        f.dropout(x, self.p)
    }
}

/// Global average pool followed by a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(b: &mut Builder, name: &str, in_features: usize, classes: usize) -> Result<Self> {
        let (weight, bias) = b.linear(name, in_features, classes)?;
        Ok(ClassifierHead { weight, bias, in_features, classes })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let pooled = f.tape.global_avg_pool(x)?;
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.linear(pooled, w, b)
    }

    pub fn param_count(in_features: usize, classes: usize) -> usize {
        in_features * classes + classes
    }
}
