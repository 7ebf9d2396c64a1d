//! Gradient-check targets: every layer type in isolation, ChoiceModule
//! variants, the reference blocks, and a whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ChoiceModule, ChoiceModuleConfig, DenseBlock, LabeledNetwork, ModelConfig, Network, ResNetBlock, SkipMode};
use crate::autograd::{grad_check, Differentiable, GradCheckConfig, GradCheckReport, Var};
use crate::error::Result;
use crate::layers::{BatchNormConfig, Bottleneck, Builder, ClassifierHead, CompositeFunction, Dropout, PoolMode};
use crate::layers::pooling_mode_forward;
use crate::params::{Buffers, Forward, Mode, ParamStore};
use crate::tensor::Tensor;

type Objective = Box<dyn Fn(&mut Forward<'_>, Var) -> Result<Var> + Send>;

/// A small parameterized computation reduced to a scalar by a fixed random
/// linear functional of its output.
pub struct Probe {
    pub name: String,
    params: ParamStore,
    buffers: Buffers,
    mode: Mode,
    body: Objective,
    readout_seed: u64,
}

impl Differentiable for Probe {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn buffers(&self) -> &Buffers {
        &self.buffers
    }
    fn objective(&self, f: &mut Forward<'_>, input: Var) -> Result<Var> {
        let y = (self.body)(f, input)?;
        let dims = f.tape.value(y).dims().to_vec();
        if dims == [1] {
            return Ok(y);
        }
        let w = Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(self.readout_seed))?;
        f.tape.dot(y, w)
    }
    fn check_mode(&self) -> Mode {
        self.mode
    }
}

/// A gradient-check target together with its input.
pub struct Target {
    pub name: String,
    pub model: Box<dyn FnMut(&GradCheckConfig, &Tensor) -> Result<GradCheckReport> + Send>,
    pub input: Tensor,
}

fn probe_target(
    name: &str,
    seed: u64,
    input_dims: &[usize],
    mode: Mode,
    build: impl FnOnce(&mut Builder) -> Result<Objective>,
) -> Result<Target> {
    let mut b = Builder::new(seed);
    let body = build(&mut b)?;
    let (mut params, mut buffers) = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x1234));
    // keep scale and shift away from their identity values so every path is exercised
    for (_, name, t) in params_iter_mut(&mut params) {
        if name.ends_with(".gamma") || name.ends_with(".bias") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
    }
    for (_, stats) in buffers.iter_mut() {
        stats.mean.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        stats.var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    let input = Tensor::randn(input_dims.to_vec(), 1.0, &mut rng)?;
    let mut probe = Probe { name: name.to_string(), params, buffers, mode, body, readout_seed: seed ^ 0xabcd };
    Ok(Target {
        name: name.to_string(),
        model: Box::new(move |cfg, x| grad_check(&mut probe, x, cfg)),
        input,
    })
}

fn params_iter_mut(p: &mut ParamStore) -> impl Iterator<Item = (usize, String, &mut Tensor)> {
    let names: Vec<String> = p.iter().map(|(_, n, _)| n.to_string()).collect();
    p.values_mut().iter_mut().zip(names).enumerate().map(|(i, (t, n))| (i, n, t))
}

/// Every layer type on its own.
pub fn layer_targets(seed: u64) -> Result<Vec<Target>> {
    let bn = BatchNormConfig::default();
    let x4 = [2, 3, 6, 6];
    Ok(vec![
        probe_target("conv2d", seed, &x4, Mode::Train, |b| {
            let conv = b.conv("conv", 3, 4, 3, true)?;
            Ok(Box::new(move |f, x| conv.forward(f, x)))
        })?,
        probe_target("conv2d_strided", seed, &[2, 2, 7, 7], Mode::Train, |b| {
            let conv = b.conv("conv", 2, 3, 3, true)?;
            Ok(Box::new(move |f, x| {
                let (w, bias) = (f.param(conv.weight), conv.bias.map(|id| f.param(id)));
                f.tape.conv2d(x, w, bias, 2, 1)
            }))
        })?,
        probe_target("batchnorm_train", seed, &[4, 3, 3, 3], Mode::Train, |b| {
            let layer = b.batchnorm("bn", 3, bn)?;
            Ok(Box::new(move |f, x| layer.forward(f, x)))
        })?,
        probe_target("batchnorm_eval", seed, &[4, 3, 3, 3], Mode::Eval, |b| {
            let layer = b.batchnorm("bn", 3, bn)?;
            Ok(Box::new(move |f, x| layer.forward(f, x)))
        })?,
        probe_target("relu", seed, &x4, Mode::Train, |_| Ok(Box::new(|f, x| f.tape.relu(x))))?,
        probe_target("composite_function", seed, &x4, Mode::Train, |b| {
            let cf = CompositeFunction::new(b, "cf", 3, 4, 5, false, bn)?;
            Ok(Box::new(move |f, x| cf.forward(f, x)))
        })?,
        probe_target("bottleneck", seed, &x4, Mode::Train, |b| {
            let bt = Bottleneck::new(b, "bt", 3, 2, false, bn)?;
            Ok(Box::new(move |f, x| bt.forward(f, x)))
        })?,
        probe_target("residual_add", seed, &x4, Mode::Train, |b| {
            let conv = b.conv("conv", 3, 3, 3, false)?;
            Ok(Box::new(move |f, x| {
                let y = conv.forward(f, x)?;
                f.tape.add(y, x)
            }))
        })?,
        probe_target("concat_channels", seed, &x4, Mode::Train, |b| {
            let conv = b.conv("conv", 3, 2, 3, false)?;
            Ok(Box::new(move |f, x| {
                let y = conv.forward(f, x)?;
                f.tape.concat_channels(&[y, x])
            }))
        })?,
        probe_target("max_pool", seed, &x4, Mode::Train, |_| {
            Ok(Box::new(|f, x| pooling_mode_forward(&mut f.tape, x, PoolMode::Max)))
        })?,
        probe_target("avg_pool", seed, &x4, Mode::Train, |_| {
            Ok(Box::new(|f, x| pooling_mode_forward(&mut f.tape, x, PoolMode::Avg)))
        })?,
        probe_target("dual_pool", seed, &x4, Mode::Train, |_| {
            Ok(Box::new(|f, x| pooling_mode_forward(&mut f.tape, x, PoolMode::Both)))
        })?,
        probe_target("dropout", seed, &x4, Mode::Train, |b| {
            let conv = b.conv("conv", 3, 3, 1, false)?;
            let drop = Dropout::new(0.3)?;
            Ok(Box::new(move |f, x| {
                let y = conv.forward(f, x)?;
                drop.forward(f, y)
            }))
        })?,
        probe_target("classifier_head", seed, &x4, Mode::Train, |b| {
            let head = ClassifierHead::new(b, "head", 3, 5)?;
            Ok(Box::new(move |f, x| head.forward(f, x)))
        })?,
        probe_target("softmax_cross_entropy", seed, &[2, 3, 2, 2], Mode::Train, |b| {
            let head = ClassifierHead::new(b, "head", 3, 4)?;
            Ok(Box::new(move |f, x| {
                let logits = head.forward(f, x)?;
                f.tape.softmax_cross_entropy(logits, &[1, 3])
            }))
        })?,
    ])
}

/// ChoiceModule in its default form and in each optional variant.
pub fn module_targets(seed: u64) -> Result<Vec<Target>> {
    let base = ChoiceModuleConfig::new(4, 3, 3);
    let variants = [
        ("choice_module", base),
        ("choice_module_per_conv", ChoiceModuleConfig { skip_mode: SkipMode::PerConv, ..base }),
        ("choice_module_unshared", ChoiceModuleConfig { share_branch_weights: false, ..base }),
        (
            "choice_module_projection",
            ChoiceModuleConfig { bottleneck_channels: 2, skip_projection: true, ..base },
        ),
    ];
    variants
        .into_iter()
        .map(|(name, cfg)| {
            probe_target(name, seed, &[2, 4, 4, 4], Mode::Train, move |b| {
                let m = ChoiceModule::new(b, "module", cfg)?;
                Ok(Box::new(move |f, x| m.forward(f, x)))
            })
        })
        .collect()
}

/// Residual and dense reference blocks.
pub fn reference_targets(seed: u64) -> Result<Vec<Target>> {
    let bn = BatchNormConfig::default();
    Ok(vec![
        probe_target("resnet_block", seed, &[2, 3, 4, 4], Mode::Train, |b| {
            let r = ResNetBlock::new(b, "res", 3, false, bn)?;
            Ok(Box::new(move |f, x| r.forward(f, x)))
        })?,
        probe_target("dense_block", seed, &[2, 3, 4, 4], Mode::Train, |b| {
            let d = DenseBlock::new(b, "dense", 3, 2, 3, false, bn, Dropout::new(0.0)?)?;
            Ok(Box::new(move |f, x| d.forward(f, x)))
        })?,
    ])
}

/// Mean cross-entropy of a whole network on a random labelled batch.
pub fn network_target(cfg: &ModelConfig, seed: u64, batch: usize) -> Result<Target> {
    let network = Network::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5678));
    let input = Tensor::randn(vec![batch, cfg.in_channels, cfg.resolution, cfg.resolution], 1.0, &mut rng)?;
    let labels = (0..batch).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    let mut model = LabeledNetwork { network, labels, mode: Mode::Train };
    Ok(Target { name: "network".into(), model: Box::new(move |c, x| grad_check(&mut model, x, c)), input })
}

/// Settings for [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub check: GradCheckConfig,
    /// Entries sampled per tensor for the whole-network target.
    pub network_entries: Option<usize>,
    pub network_batch: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: (0..5).collect(),
            check: GradCheckConfig { tolerance: 1e-4, ..Default::default() },
            network_entries: Some(4),
            network_batch: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub target: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Check all layers, module variants, reference blocks and `model` for each seed.
pub fn run_suite(model: &ModelConfig, cfg: &SuiteConfig, mut on_result: impl FnMut(&SuiteResult)) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let mut targets = layer_targets(seed)?;
        targets.extend(module_targets(seed)?);
        targets.extend(reference_targets(seed)?);
        targets.push(network_target(model, seed, cfg.network_batch)?);
        for mut t in targets {
            let check = if t.name == "network" {
                GradCheckConfig { max_entries_per_tensor: cfg.network_entries, sample_seed: seed, ..cfg.check.clone() }
            } else {
                GradCheckConfig { sample_seed: seed, ..cfg.check.clone() }
            };
            let report = (t.model)(&check, &t.input)?;
            let r = SuiteResult { target: t.name, seed, report };
            on_result(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// CSV `target,seed,param_group,max_rel_err,pass` over all results.
pub fn suite_csv(results: &[SuiteResult]) -> String {
    let mut out = String::from("target,seed,param_group,max_rel_err,pass\n");
    for r in results {
        for g in &r.report.groups {
            out.push_str(&format!("{},{},{},{:e},{}\n", r.target, r.seed, g.name, g.max_rel_err, g.passed));
        }
    }
    out
}
