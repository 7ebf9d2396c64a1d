use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::norm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::layers::{BatchNormConfig, PoolMode};

/// Number of stages separated by pooling. Fixed by the architecture.
pub const NUM_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    ChoiceNet,
    ResNet,
    DenseNet,
}

/// Where the residual additions of a branch sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// One skip spanning the whole three-convolution chain.
    #[default]
    Chain,
    /// Every convolution in the chain gets its own residual addition.
    PerConv,
}

fn default_in_channels() -> usize {
    3
}
fn default_stem_kernel() -> usize {
    3
}
fn default_pooling() -> PoolMode {
    PoolMode::Both
}
fn default_modules() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

/// Flat, serializable description of a network: stem, three stages with
/// pooling (and optional 1x1 transitions) between them, and a
/// global-average-pool classifier head. The stage type is chosen by `arch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: ArchKind,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default = "default_pooling")]
    pub pooling: PoolMode,
    /// Output channels of the 1x1 projection after each pooling; empty disables them.
    #[serde(default)]
    pub transitions: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    /// Bias on convolutions that feed a batch norm.
    #[serde(default)]
    pub conv_bias: bool,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,

    #[serde(default = "default_modules")]
    pub modules_per_block: usize,
    /// Per-block bottleneck width `c_b`.
    #[serde(default)]
    pub bottleneck_channels: Vec<usize>,
    /// Per-block branch width `c`.
    #[serde(default)]
    pub branch_channels: Vec<usize>,
    #[serde(default)]
    pub skip_mode: SkipMode,
    #[serde(default = "default_true")]
    pub share_branch_weights: bool,
    /// Insert a 1x1 projection on the identity path when `c != c_b`.
    #[serde(default)]
    pub skip_projection: bool,

    /// Residual blocks or dense layers per stage for the reference networks.
    #[serde(default)]
    pub units_per_stage: usize,
    /// Dense-block growth rate.
    #[serde(default)]
    pub growth: usize,
}

impl ModelConfig {
    pub fn bn(&self) -> BatchNormConfig {
        BatchNormConfig { eps: self.bn_eps, momentum: self.bn_momentum }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("model.{key}: {msg}")));
        if self.in_channels == 0 {
            return bad("in_channels", "must be >= 1".into());
        }
        if self.resolution < 4 || self.resolution % 4 != 0 {
            return bad(
                "resolution",
                format!("{} is too small for two 2x2 poolings (needs a multiple of 4)", self.resolution),
            );
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be >= 1".into());
        }
        if self.stem_channels == 0 {
            return bad("stem_channels", "must be >= 1".into());
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem_kernel", format!("{} must be odd", self.stem_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) {
            return bad("bn_eps", "must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum", "must lie in [0, 1]".into());
        }
        if !self.transitions.is_empty() && self.transitions.len() != NUM_BLOCKS - 1 {
            return bad("transitions", format!("needs {} entries or none", NUM_BLOCKS - 1));
        }
        if self.transitions.iter().any(|&t| t == 0) {
            return bad("transitions", "entries must be >= 1".into());
        }
        match self.arch {
            ArchKind::ChoiceNet => {
                if self.modules_per_block == 0 {
                    return bad("modules_per_block", "must be >= 1".into());
                }
                for (key, v) in [("bottleneck_channels", &self.bottleneck_channels), ("branch_channels", &self.branch_channels)] {
                    if v.len() != NUM_BLOCKS {
                        return bad(key, format!("needs one entry per block ({NUM_BLOCKS})"));
                    }
                    if v.iter().any(|&c| c == 0) {
                        return bad(key, "entries must be >= 1".into());
                    }
                }
                for (cb, c) in self.bottleneck_channels.iter().zip(&self.branch_channels) {
                    if cb != c && !self.skip_projection {
                        return bad(
                            "skip_projection",
                            format!("branch width {c} differs from bottleneck width {cb}; enable skip_projection"),
                        );
                    }
                }
            }
            ArchKind::ResNet | ArchKind::DenseNet => {
                if self.units_per_stage == 0 {
                    return bad("units_per_stage", "must be >= 1".into());
                }
                if self.arch == ArchKind::DenseNet && self.growth == 0 {
                    return bad("growth", "must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// Hyperparameters of one ChoiceModule. Kernel sizes (3, 5, 7) and chain
/// length (3) are fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChoiceModuleConfig {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub branch_channels: usize,
    pub skip_mode: SkipMode,
    pub share_branch_weights: bool,
    pub skip_projection: bool,
    pub conv_bias: bool,
    pub bn: BatchNormConfig,
}

impl ChoiceModuleConfig {
    pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];
    pub const CONVS_PER_BRANCH: usize = 3;

    pub fn new(in_channels: usize, bottleneck_channels: usize, branch_channels: usize) -> Self {
        ChoiceModuleConfig {
            in_channels,
            bottleneck_channels,
            branch_channels,
            skip_mode: SkipMode::Chain,
            share_branch_weights: true,
            skip_projection: false,
            conv_bias: false,
            bn: BatchNormConfig::default(),
        }
    }

    /// Six branch outputs of width `c` plus the identity path of width `c_b`.
    pub fn output_channels(&self) -> usize {
        6 * self.branch_channels + self.bottleneck_channels
    }

    pub fn needs_projection(&self) -> bool {
        self.branch_channels != self.bottleneck_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.bottleneck_channels == 0 || self.branch_channels == 0 {
            return Err(Error::Config("choice module widths must be >= 1".into()));
        }
        if self.needs_projection() && !self.skip_projection {
            return Err(Error::ChannelMismatch {
                op: "choice module skip add",
                expected: self.branch_channels,
                actual: self.bottleneck_channels,
            });
        }
        Ok(())
    }
}
