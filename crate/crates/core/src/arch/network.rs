use std::fmt::Write as _;

use crate::arch::block::ChoiceBlock;
use crate::arch::config::{ArchKind, ChoiceModuleConfig, ModelConfig, NUM_BLOCKS};
use crate::arch::reference::{DenseBlock, ResNetBlock};
use crate::autograd::{Differentiable, Var};
use crate::error::{Error, Result};
use crate::layers::{Bottleneck, Builder, ClassifierHead, CompositeFunction, Dropout, pooling_mode_forward};
use crate::params::{Buffers, Forward, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Choice(ChoiceBlock),
    Residual(Vec<ResNetBlock>),
    Dense(DenseBlock),
}

impl Stage {
    fn forward(&self, f: &mut Forward<'_>, x: Var, dropout: Dropout) -> Result<Var> {
        match self {
            Stage::Choice(block) => block.forward(f, x),
            Stage::Residual(blocks) => {
                let mut h = x;
                for block in blocks {
                    let y = block.forward(f, h)?;
                    h = dropout.forward(f, y)?;
                }
                Ok(h)
            }
            Stage::Dense(block) => block.forward(f, x),
        }
    }
}

/// Parameter totals grouped by top-level submodule
/// (`stem`, `block1`, `transition1`, ..., `head`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl ParamCount {
    fn from_parts(breakdown: Vec<(String, usize)>) -> Self {
        ParamCount { total: breakdown.iter().map(|(_, n)| n).sum(), breakdown }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("submodule,params\n");
        for (name, n) in &self.breakdown {
            let _ = writeln!(out, "{name},{n}");
        }
        let _ = writeln!(out, "total,{}", self.total);
        out
    }
}

/// Channel width and spatial size at the input of each stage and the head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub channels: usize,
    pub resolution: usize,
}

fn stage_out_channels(cfg: &ModelConfig, stage: usize, in_channels: usize) -> usize {
    match cfg.arch {
        ArchKind::ChoiceNet => 6 * cfg.branch_channels[stage] + cfg.bottleneck_channels[stage],
        ArchKind::ResNet => in_channels,
        ArchKind::DenseNet => in_channels + cfg.units_per_stage * cfg.growth,
    }
}

fn module_template(cfg: &ModelConfig, stage: usize, in_channels: usize) -> ChoiceModuleConfig {
    ChoiceModuleConfig {
        in_channels,
        bottleneck_channels: cfg.bottleneck_channels[stage],
        branch_channels: cfg.branch_channels[stage],
        skip_mode: cfg.skip_mode,
        share_branch_weights: cfg.share_branch_weights,
        skip_projection: cfg.skip_projection,
        conv_bias: cfg.conv_bias,
        bn: cfg.bn(),
    }
}

/// Walk the configuration and report the tensor shape entering every stage.
pub fn shape_trace(cfg: &ModelConfig) -> Result<Vec<StageShape>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut channels = cfg.stem_channels;
    let mut res = cfg.resolution;
    for s in 0..NUM_BLOCKS {
        out.push(StageShape { name: format!("block{}", s + 1), channels, resolution: res });
        channels = stage_out_channels(cfg, s, channels);
        if s + 1 < NUM_BLOCKS {
            channels = cfg.pooling.out_channels(channels);
            res /= 2;
            if let Some(&t) = cfg.transitions.get(s) {
                out.push(StageShape { name: format!("transition{}", s + 1), channels, resolution: res });
                channels = t;
            }
        }
    }
    out.push(StageShape { name: "head".into(), channels, resolution: res });
    Ok(out)
}

/// Closed-form parameter count derived from the configuration alone.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let bias = cfg.conv_bias;
    let mut parts = vec![("stem".to_string(), CompositeFunction::param_count(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, bias))];
    let mut channels = cfg.stem_channels;
    for s in 0..NUM_BLOCKS {
        let n = match cfg.arch {
            ArchKind::ChoiceNet => ChoiceBlock::param_count(&module_template(cfg, s, channels), cfg.modules_per_block),
            ArchKind::ResNet => cfg.units_per_stage * ResNetBlock::param_count(channels, bias),
            ArchKind::DenseNet => DenseBlock::param_count(channels, cfg.growth, cfg.units_per_stage, bias),
        };
        parts.push((format!("block{}", s + 1), n));
        channels = stage_out_channels(cfg, s, channels);
        if s + 1 < NUM_BLOCKS {
            channels = cfg.pooling.out_channels(channels);
            if let Some(&t) = cfg.transitions.get(s) {
                parts.push((format!("transition{}", s + 1), Bottleneck::param_count(channels, t, bias)));
                channels = t;
            }
        }
    }
    parts.push(("head".into(), ClassifierHead::param_count(channels, cfg.num_classes)));
    Ok(ParamCount::from_parts(parts))
}

/// A complete classifier: stem, three stages separated by pooling (and
/// optional transitions), and a global-average-pool head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ModelConfig,
    pub params: ParamStore,
    pub buffers: Buffers,
    stem: CompositeFunction,
    stages: Vec<Stage>,
    transitions: Vec<Bottleneck>,
    head: ClassifierHead,
    dropout: Dropout,
}

impl Network {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let bias = cfg.conv_bias;
        let dropout = Dropout::new(cfg.dropout)?;
        let mut b = Builder::new(seed);
        let stem = CompositeFunction::new(&mut b, "stem", cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, bias, cfg.bn())?;
        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        let mut channels = cfg.stem_channels;
        for s in 0..NUM_BLOCKS {
            let name = format!("block{}", s + 1);
            let stage = match cfg.arch {
                ArchKind::ChoiceNet => Stage::Choice(ChoiceBlock::new(
                    &mut b,
                    &name,
                    module_template(cfg, s, channels),
                    cfg.modules_per_block,
                    dropout,
                )?),
                ArchKind::ResNet => Stage::Residual(
                    (0..cfg.units_per_stage)
                        .map(|u| ResNetBlock::new(&mut b, &format!("{name}.unit{}", u + 1), channels, bias, cfg.bn()))
                        .collect::<Result<Vec<_>>>()?,
                ),
                ArchKind::DenseNet => Stage::Dense(DenseBlock::new(
                    &mut b,
                    &name,
                    channels,
                    cfg.growth,
                    cfg.units_per_stage,
                    bias,
                    cfg.bn(),
                    dropout,
                )?),
            };
            stages.push(stage);
            channels = stage_out_channels(cfg, s, channels);
            if s + 1 < NUM_BLOCKS {
                channels = cfg.pooling.out_channels(channels);
                if let Some(&t) = cfg.transitions.get(s) {
                    transitions.push(Bottleneck::new(&mut b, &format!("transition{}", s + 1), channels, t, bias, cfg.bn())?);
                    channels = t;
                }
            }
        }
        let head = ClassifierHead::new(&mut b, "head", channels, cfg.num_classes)?;
        let (params, buffers) = b.finish();
        Ok(Network { config: cfg.clone(), params, buffers, stem, stages, transitions, head, dropout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Logits `[N, num_classes]` for an `[N, in_channels, resolution, resolution]` input.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = f.tape.value(x).shape().nchw()?;
        let res = self.config.resolution;
        if c != self.config.in_channels || h != res || w != res {
            return Err(Error::InvalidShape(format!(
                "network expects [N, {}, {res}, {res}] input, got {}",
                self.config.in_channels,
                f.tape.value(x).shape()
            )));
        }
        let mut h = self.stem.forward(f, x)?;
        for (s, stage) in self.stages.iter().enumerate() {
            h = stage.forward(f, h, self.dropout)?;
            if s + 1 < self.stages.len() {
                h = pooling_mode_forward(&mut f.tape, h, self.config.pooling)?;
                if let Some(t) = self.transitions.get(s) {
                    h = t.forward(f, h)?;
                }
            }
        }
        self.head.forward(f, h)
    }

    /// Eval-mode logits without recording gradients for later use.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut f = Forward::new(&self.params, &self.buffers, Mode::Eval, 0);
        let x = f.input(input.clone());
        let logits = self.forward(&mut f, x)?;
        Ok(f.tape.value(logits).clone())
    }

    /// Parameter totals of the instantiated tensors, grouped by the first
    /// segment of each parameter name.
    pub fn enumerate_parameters(&self) -> ParamCount {
        let mut parts: Vec<(String, usize)> = Vec::new();
        for (_, name, t) in self.params.iter() {
            let group = name.split('.').next().unwrap_or(name);
            match parts.last_mut() {
                Some((g, n)) if g == group => *n += t.numel(),
                _ => parts.push((group.to_string(), t.numel())),
            }
        }
        ParamCount::from_parts(parts)
    }
}

/// A network paired with a labelled batch, exposing mean cross-entropy as
/// the objective for gradient checking.
pub struct LabeledNetwork {
    pub network: Network,
    pub labels: Vec<usize>,
    pub mode: Mode,
}

impl Differentiable for LabeledNetwork {
    fn params(&self) -> &ParamStore {
        &self.network.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.network.params
    }
    fn buffers(&self) -> &Buffers {
        &self.network.buffers
    }
    fn objective(&self, f: &mut Forward<'_>, input: Var) -> Result<Var> {
        let logits = self.network.forward(f, input)?;
        f.tape.softmax_cross_entropy(logits, &self.labels)
    }
    fn check_mode(&self) -> Mode {
        self.mode
    }
}
