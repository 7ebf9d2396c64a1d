//! SGD with momentum, piecewise-constant learning-rate schedule, weight
//! decay, optional gradient clipping, and the epoch-level training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Network;
use crate::data::{augment, collate, AugmentationPolicy, Normalization, Sample};
use crate::error::{Error, Result};
use crate::params::{apply_updates, Buffers, Forward, Mode, ParamStore};
use crate::tensor::Tensor;

fn default_schedule() -> Vec<(usize, f64)> {
    vec![(0, 1e-3), (100, 1e-4), (200, 1e-5)]
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    500
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    /// `(first epoch, learning rate)` pairs; the rate holds until the next boundary.
    #[serde(default = "default_schedule")]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Rescale the global gradient norm down to this bound when exceeded.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    /// Batch size used for evaluation passes.
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            schedule: default_schedule(),
            momentum: default_momentum(),
            nesterov: false,
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            grad_clip_norm: None,
            eval_batch_size: default_eval_batch(),
        }
    }
}

impl SgdConfig {
    pub fn base_lr(&self) -> f64 {
        self.schedule.first().map_or(0.0, |&(_, lr)| lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("optim.{key}: {msg}")));
        match self.schedule.first() {
            None => return bad("schedule", "needs at least one (epoch, lr) entry"),
            Some(&(e, _)) if e != 0 => return bad("schedule", "first entry must start at epoch 0"),
            _ => {}
        }
        for w in self.schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad("schedule", "epoch boundaries must be strictly increasing");
            }
            if w[1].1 >= w[0].1 {
                return bad("schedule", "learning rates must be strictly decreasing");
            }
        }
        if self.schedule.iter().any(|&(_, lr)| !(lr >= 0.0) || !lr.is_finite()) {
            return bad("schedule", "learning rates must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be >= 1");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad("grad_clip_norm", "must be > 0");
            }
        }
        Ok(())
    }
}

/// Piecewise-constant lookup; a boundary epoch already uses the new rate.
pub fn lr_at_epoch(cfg: &SgdConfig, epoch: usize) -> f64 {
    cfg.schedule.iter().take_while(|&&(start, _)| start <= epoch).last().map_or(cfg.base_lr(), |&(_, lr)| lr)
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scale `grads` so that their global L2 norm does not exceed `bound`.
/// Returns the norm before and after clipping.
pub fn clip_global_norm(grads: &mut [Tensor], bound: f64) -> (f64, f64) {
    let before = global_norm(grads);
    if before <= bound {
        return (before, before);
    }
    let mut scale = bound / before;
    loop {
        let clipped: Vec<Tensor> = grads.iter().map(|g| g.map(|v| v * scale)).collect();
        let after = global_norm(&clipped);
        if after <= bound {
            grads.clone_from_slice(&clipped);
            return (before, after);
        }
        // rounding pushed the norm a hair over the bound
        scale *= 1.0 - f64::EPSILON;
    }
}

/// Norms observed during one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One SGD update:
/// clip → `g += wd·p` → `v = μ·v + g` → `u = nesterov ? μ·v + g : v` → `p -= lr·u`.
pub fn sgd_step(
    params: &mut ParamStore,
    velocity: &mut [Tensor],
    mut grads: Vec<Tensor>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<StepInfo> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::MissingGradient(format!(
            "{} gradients and {} momentum buffers for {} parameters",
            grads.len(),
            velocity.len(),
            params.len()
        )));
    }
    let (grad_norm, clipped_norm) = match cfg.grad_clip_norm {
        Some(bound) => clip_global_norm(&mut grads, bound),
        None => {
            let n = global_norm(&grads);
            (n, n)
        }
    };
    let mu = cfg.momentum;
    for ((p, v), g) in params.values_mut().iter_mut().zip(velocity.iter_mut()).zip(&grads) {
        p.expect_same_shape(g, "sgd gradient")?;
        p.expect_same_shape(v, "sgd momentum")?;
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let g = gi + cfg.weight_decay * *pi;
            *vi = mu * *vi + g;
            let update = if cfg.nesterov { mu * *vi + g } else { *vi };
            *pi -= lr * update;
        }
    }
    Ok(StepInfo { grad_norm, clipped_norm })
}

/// Mean cross-entropy and error rate (`100 − accuracy%`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub error_rate: f64,
    pub samples: usize,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        100.0 - self.error_rate
    }
}

#[derive(Default)]
struct MetricSum {
    loss: f64,
    correct: usize,
    samples: usize,
}

impl MetricSum {
    fn add(&mut self, mean_loss: f64, logits: &Tensor, labels: &[usize]) {
        self.loss += mean_loss * labels.len() as f64;
        self.correct += count_correct(logits, labels);
        self.samples += labels.len();
    }

    fn finish(&self) -> Result<Metrics> {
        if self.samples == 0 {
            return Err(Error::EmptyInput("metrics"));
        }
        let n = self.samples as f64;
        Ok(Metrics { loss: self.loss / n, error_rate: 100.0 * (1.0 - self.correct as f64 / n), samples: self.samples })
    }
}

/// Number of rows whose first maximal logit is at the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let argmax = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            argmax == label
        })
        .count()
}

/// Per-epoch record; validation is absent when no validation set is used.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: Metrics,
    pub val: Option<Metrics>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,train_err,val_loss,val_err";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = write!(out, "{},{:e},{:.17e},{:.17e},", r.epoch, r.lr, r.train.loss, r.train.error_rate);
        match r.val {
            Some(v) => {
                let _ = writeln!(out, "{:.17e},{:.17e}", v.loss, v.error_rate);
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

/// Index of the highest value; ties go to the earliest.
pub fn argmax_earliest(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::EmptyInput("best epoch selection"));
    }
    Ok(values.iter().enumerate().fold(0, |best, (i, &v)| if v > values[best] { i } else { best }))
}

/// Epoch with the highest validation accuracy, earliest on ties.
pub fn best_checkpoint_select(history: &[EpochRecord]) -> Result<usize> {
    let accs: Vec<f64> = history.iter().map(|r| r.val.map_or(f64::NEG_INFINITY, |m| m.accuracy())).collect();
    argmax_earliest(&accs)
}

/// Network, optimizer state and training progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub network: Network,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(network: Network, seed: u64) -> Result<Self> {
        let velocity = network.params.values().iter().map(Tensor::zeros_like).collect();
        Ok(TrainState { network, velocity, epoch: 0, step: 0, seed, history: Vec::new() })
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch as u64 + 1);
        rng
    }
}

/// One pass over `data` in a seeded random order with per-sample
/// augmentation; batch-norm running statistics are updated after each step.
/// Metrics come from the training-mode forward passes.
pub fn train_epoch(
    state: &mut TrainState,
    data: &[Sample],
    norm: &Normalization,
    policy: AugmentationPolicy,
    cfg: &SgdConfig,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let lr = lr_at_epoch(cfg, state.epoch);
    let mut rng = state.epoch_rng();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut sums = MetricSum::default();
    for batch in order.chunks(cfg.batch_size) {
        let images = batch
            .iter()
            .map(|&i| augment(&data[i].image, policy, norm, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
        let x = Tensor::stack(&images)?;
        let dropout_seed = rng.next_u64();
        let net = &state.network;
        let mut f = Forward::new(&net.params, &net.buffers, Mode::Train, dropout_seed);
        let xv = f.input(x);
        let logits = net.forward(&mut f, xv)?;
        let loss = f.tape.softmax_cross_entropy(logits, &labels)?;
        let loss_value = f.tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        sums.add(loss_value, f.tape.value(logits), &labels);
        let grads = f.tape.backward(loss)?;
        let grads = f.param_grads(grads)?;
        let updates = f.into_updates();
        sgd_step(&mut state.network.params, &mut state.velocity, grads, lr, cfg)?;
        apply_updates(&mut state.network.buffers, &updates);
        state.step += 1;
    }
    state.epoch += 1;
    sums.finish()
}

/// Eval-mode metrics (running batch-norm statistics, no dropout, no augmentation).
pub fn evaluate(network: &Network, data: &[Sample], norm: &Normalization, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut sums = MetricSum::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = collate(&refs, norm)?;
        let mut f = Forward::new(&network.params, &network.buffers, Mode::Eval, 0);
        let xv = f.input(x);
        let logits = network.forward(&mut f, xv)?;
        let loss = f.tape.softmax_cross_entropy(logits, &labels)?;
        sums.add(f.tape.value(loss).item()?, f.tape.value(logits), &labels);
    }
    sums.finish()
}

/// Options for [`fit`].
#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions {
    /// Stop as soon as the training error rate (percent) is at or below this.
    pub stop_at_train_error: Option<f64>,
}

/// Parameters and buffers of the best epoch seen so far.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: ParamStore,
    pub buffers: Buffers,
}

/// Train until `cfg.max_epochs`, validating after every epoch when a
/// validation set is given and remembering the best-validation weights.
pub fn fit(
    state: &mut TrainState,
    train: &[Sample],
    val: &[Sample],
    norm: &Normalization,
    policy: AugmentationPolicy,
    cfg: &SgdConfig,
    opts: FitOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Option<Snapshot>> {
    cfg.validate()?;
    let mut best: Option<(f64, Snapshot)> = None;
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let lr = lr_at_epoch(cfg, epoch);
        let train_metrics = train_epoch(state, train, norm, policy, cfg)?;
        let val_metrics =
            if val.is_empty() { None } else { Some(evaluate(&state.network, val, norm, cfg.eval_batch_size)?) };
        let record = EpochRecord { epoch, lr, train: train_metrics, val: val_metrics };
        if let Some(v) = val_metrics {
            if best.as_ref().map_or(true, |(acc, _)| v.accuracy() > *acc) {
                let snap = Snapshot {
                    epoch,
                    params: state.network.params.clone(),
                    buffers: state.network.buffers.clone(),
                };
                best = Some((v.accuracy(), snap));
            }
        }
        on_epoch(&record);
        state.history.push(record);
        if opts.stop_at_train_error.is_some_and(|t| train_metrics.error_rate <= t) {
            break;
        }
    }
    Ok(best.map(|(_, s)| s))
}
