use std::fmt;

use crate::arch::config::{ChoiceModuleConfig, SkipMode};
use crate::autograd::Var;
use crate::error::Result;
use crate::layers::{Bottleneck, Builder, CompositeFunction, Conv2d};
use crate::params::{Forward, ParamId};

/// One of the seven channel groups a module emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModulePart {
    /// Chain of kernel `k` with its skip connection.
    Skip(usize),
    /// The same chain without the skip.
    Plain(usize),
    /// Bottleneck output passed through unchanged.
    Identity,
}

impl ModulePart {
    /// Letter used for the group in the module diagram (A..G).
    pub fn letter(self) -> char {
        match self {
            ModulePart::Skip(3) => 'A',
            ModulePart::Plain(3) => 'B',
            ModulePart::Skip(5) => 'C',
            ModulePart::Plain(5) => 'D',
            ModulePart::Identity => 'E',
            ModulePart::Skip(7) => 'F',
            ModulePart::Plain(7) => 'G',
            _ => '?',
        }
    }
}

impl fmt::Display for ModulePart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModulePart::Skip(k) => write!(f, "skip{k}"),
            ModulePart::Plain(k) => write!(f, "plain{k}"),
            ModulePart::Identity => f.write_str("identity"),
        }
    }
}

/// Position of one channel group inside the concatenated module output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartSlice {
    pub part: ModulePart,
    pub offset: usize,
    pub channels: usize,
}

/// Output order: skip3, plain3, skip5, plain5, identity, skip7, plain7.
pub fn output_layout(cfg: &ChoiceModuleConfig) -> Vec<PartSlice> {
    let (c, cb) = (cfg.branch_channels, cfg.bottleneck_channels);
    let order = [
        (ModulePart::Skip(3), c),
        (ModulePart::Plain(3), c),
        (ModulePart::Skip(5), c),
        (ModulePart::Plain(5), c),
        (ModulePart::Identity, cb),
        (ModulePart::Skip(7), c),
        (ModulePart::Plain(7), c),
    ];
    let mut offset = 0;
    order
        .into_iter()
        .map(|(part, channels)| {
            let s = PartSlice { part, offset, channels };
            offset += channels;
            s
        })
        .collect()
}

/// Which chain a convolution belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchPath {
    /// Weights used by both the skip and the plain output.
    Shared,
    Plain,
    Skip,
}

impl fmt::Display for BranchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchPath::Shared => "shared",
            BranchPath::Plain => "plain",
            BranchPath::Skip => "skip",
        })
    }
}

/// A branch convolution, as seen by weight analyses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchConv {
    pub kernel: usize,
    /// Position in the chain, starting at 1.
    pub conv_index: usize,
    pub path: BranchPath,
    pub weight: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Branch {
    kernel: usize,
    plain: Vec<CompositeFunction>,
    /// Separate weights for the skip chain; `None` when shared with `plain`.
    skip: Option<Vec<CompositeFunction>>,
}

/// Intermediate tensors of one module evaluation.
#[derive(Clone, Debug)]
pub struct ModuleOutputs {
    pub e: Var,
    /// Skip outputs for kernels 3, 5, 7.
    pub a: [Var; 3],
    /// Plain outputs for kernels 3, 5, 7.
    pub b: [Var; 3],
    pub output: Var,
}

/// Bottleneck followed by 3x3, 5x5 and 7x7 chains, each emitted both with
/// and without a skip connection, concatenated with the bottleneck output.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceModule {
    cfg: ChoiceModuleConfig,
    bottleneck: Bottleneck,
    /// 1x1 convolution mapping `c_b` to `c` on the identity path of the skips.
    projection: Option<Conv2d>,
    branches: Vec<Branch>,
}

impl ChoiceModule {
    pub fn new(b: &mut Builder, name: &str, cfg: ChoiceModuleConfig) -> Result<Self> {
        cfg.validate()?;
        let (cb, c, bias) = (cfg.bottleneck_channels, cfg.branch_channels, cfg.conv_bias);
        let bottleneck = Bottleneck::new(b, &format!("{name}.bottleneck"), cfg.in_channels, cb, bias, cfg.bn)?;
        let projection = if cfg.needs_projection() {
            Some(b.conv(&format!("{name}.projection"), cb, c, 1, true)?)
        } else {
            None
        };
        let chain = |b: &mut Builder, prefix: &str, k: usize| -> Result<Vec<CompositeFunction>> {
            (0..ChoiceModuleConfig::CONVS_PER_BRANCH)
                .map(|i| {
                    let in_c = if i == 0 { cb } else { c };
                    CompositeFunction::new(b, &format!("{prefix}.cf{}", i + 1), in_c, c, k, bias, cfg.bn)
                })
                .collect()
        };
        let mut branches = Vec::new();
        for k in ChoiceModuleConfig::KERNEL_SIZES {
            let branch = if cfg.share_branch_weights {
                Branch { kernel: k, plain: chain(b, &format!("{name}.k{k}.shared"), k)?, skip: None }
            } else {
                let plain = chain(b, &format!("{name}.k{k}.plain"), k)?;
                let skip = chain(b, &format!("{name}.k{k}.skip"), k)?;
                Branch { kernel: k, plain, skip: Some(skip) }
            };
            branches.push(branch);
        }
        Ok(ChoiceModule { cfg, bottleneck, projection, branches })
    }

    pub fn config(&self) -> &ChoiceModuleConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.output_channels()
    }

    pub fn layout(&self) -> Vec<PartSlice> {
        output_layout(&self.cfg)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(f, x)?.output)
    }

    pub fn forward_parts(&self, f: &mut Forward<'_>, x: Var) -> Result<ModuleOutputs> {
        let e = self.bottleneck.forward(f, x)?;
        let skip_in = match &self.projection {
            Some(p) => p.forward(f, e)?,
            None => e,
        };
        let mut a = Vec::with_capacity(3);
        let mut b = Vec::with_capacity(3);
        for branch in &self.branches {
            let mut plain = e;
            for cf in &branch.plain {
                plain = cf.forward(f, plain)?;
            }
            let skip_chain = branch.skip.as_ref().unwrap_or(&branch.plain);
            let skipped = match self.cfg.skip_mode {
                SkipMode::Chain => {
                    let body = if branch.skip.is_some() {
                        let mut h = e;
                        for cf in skip_chain {
                            h = cf.forward(f, h)?;
                        }
                        h
                    } else {
                        plain
                    };
                    f.tape.add(body, skip_in)?
                }
                SkipMode::PerConv => {
                    let mut h = e;
                    for (i, cf) in skip_chain.iter().enumerate() {
                        let y = cf.forward(f, h)?;
                        let identity = if i == 0 { skip_in } else { h };
                        h = f.tape.add(y, identity)?;
                    }
                    h
                }
            };
            a.push(skipped);
            b.push(plain);
        }
        let output = f.tape.concat_channels(&[a[0], b[0], a[1], b[1], e, a[2], b[2]])?;
        Ok(ModuleOutputs { e, a: [a[0], a[1], a[2]], b: [b[0], b[1], b[2]], output })
    }

    /// Every branch convolution, ordered by kernel, then path, then chain position.
    pub fn branch_convs(&self) -> Vec<BranchConv> {
        let mut out = Vec::new();
        for branch in &self.branches {
            let chains: Vec<(BranchPath, &Vec<CompositeFunction>)> = match &branch.skip {
                None => vec![(BranchPath::Shared, &branch.plain)],
                Some(skip) => vec![(BranchPath::Skip, skip), (BranchPath::Plain, &branch.plain)],
            };
            for (path, chain) in chains {
                for (i, cf) in chain.iter().enumerate() {
                    out.push(BranchConv { kernel: branch.kernel, conv_index: i + 1, path, weight: cf.conv.weight });
                }
            }
        }
        out
    }

    /// Closed-form parameter count of a module with this configuration.
    pub fn param_count(cfg: &ChoiceModuleConfig) -> usize {
        let (cb, c, bias) = (cfg.bottleneck_channels, cfg.branch_channels, cfg.conv_bias);
        let bottleneck = Bottleneck::param_count(cfg.in_channels, cb, bias);
        let projection = if cfg.needs_projection() { Conv2d::param_count(cb, c, 1, true) } else { 0 };
        let chains = if cfg.share_branch_weights { 1 } else { 2 };
        let per_chain: usize = ChoiceModuleConfig::KERNEL_SIZES
            .iter()
            .map(|&k| CompositeFunction::param_count(cb, c, k, bias) + 2 * CompositeFunction::param_count(c, c, k, bias))
            .sum();
        bottleneck + projection + chains * per_chain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::params::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: ChoiceModuleConfig, seed: u64) -> (ChoiceModule, crate::params::ParamStore, crate::params::Buffers) {
        let mut b = Builder::new(seed);
        let m = ChoiceModule::new(&mut b, "m", cfg).unwrap();
        let (p, buf) = b.finish();
        (m, p, buf)
    }

    #[test]
    fn output_channels_and_spatial_size() {
        let cfg = ChoiceModuleConfig::new(16, 8, 8);
        assert_eq!(cfg.output_channels(), 56);
        let (m, p, buf) = build(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = Forward::new(&p, &buf, Mode::Train, 0);
        let x = f.input(Tensor::randn(vec![2, 16, 8, 8], 1.0, &mut rng).unwrap());
        let y = m.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.value(y).dims(), &[2, 56, 8, 8]);
    }

    #[test]
    fn layout_is_contiguous_and_lettered() {
        let layout = output_layout(&ChoiceModuleConfig::new(4, 3, 5));
        let letters: String = layout.iter().map(|s| s.part.letter()).collect();
        assert_eq!(letters, "ABCDEFG");
        assert_eq!(layout[4], PartSlice { part: ModulePart::Identity, offset: 20, channels: 3 });
        assert_eq!(layout.last().unwrap().offset + 5, 6 * 5 + 3);
    }

    #[test]
    fn width_mismatch_without_projection_is_rejected() {
        let mut b = Builder::new(0);
        let err = ChoiceModule::new(&mut b, "m", ChoiceModuleConfig::new(8, 4, 6)).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { .. }));
        let cfg = ChoiceModuleConfig { skip_projection: true, ..ChoiceModuleConfig::new(8, 4, 6) };
        assert!(ChoiceModule::new(&mut b, "m", cfg).is_ok());
    }

    #[test]
    fn analytic_count_matches_enumeration() {
        for share in [true, false] {
            for (cb, c, proj) in [(4, 4, false), (3, 5, true)] {
                let cfg = ChoiceModuleConfig {
                    share_branch_weights: share,
                    skip_projection: proj,
                    ..ChoiceModuleConfig::new(8, cb, c)
                };
                let (_, p, _) = build(cfg, 0);
                assert_eq!(ChoiceModule::param_count(&cfg), p.numel());
            }
        }
    }

    #[test]
    fn branch_convs_cover_each_chain() {
        let (m, _, _) = build(ChoiceModuleConfig::new(4, 2, 2), 0);
        assert_eq!(m.branch_convs().len(), 9);
        let cfg = ChoiceModuleConfig { share_branch_weights: false, ..ChoiceModuleConfig::new(4, 2, 2) };
        let (m, _, _) = build(cfg, 0);
        let convs = m.branch_convs();
        assert_eq!(convs.len(), 18);
        assert_eq!((convs[0].kernel, convs[0].path, convs[0].conv_index), (3, BranchPath::Skip, 1));
    }
}
