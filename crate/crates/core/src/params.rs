//! Named parameter storage, batch-norm buffers and the per-step forward context.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormMode, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::norm::BatchStats;
use crate::kernels::RunningStats;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Batch-norm running statistics, not trained by gradient descent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers {
    names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Buffers {
    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> Result<BufferId> {
        self.names.push(name.into());
        self.stats.push(RunningStats::new(channels)?);
        Ok(BufferId(self.stats.len() - 1))
    }

    pub fn get(&self, id: BufferId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats)> {
        self.names.iter().map(String::as_str).zip(self.stats.iter_mut())
    }
}

/// Pending running-statistics update produced by a training forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate {
    pub buffer: BufferId,
    pub stats: BatchStats,
    pub momentum: f64,
}

/// Everything one forward pass needs: a fresh tape with every parameter
/// registered, read access to the running statistics, and the dropout rng.
pub struct Forward<'a> {
    pub tape: Tape,
    params: Vec<Var>,
    buffers: &'a Buffers,
    mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<BatchNormUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &ParamStore, buffers: &'a Buffers, mode: Mode, dropout_seed: u64) -> Self {
        let mut tape = Tape::new();
        let params = params.values().iter().map(|v| tape.param(v.clone())).collect();
        Forward { tape, params, buffers, mode, rng: ChaCha8Rng::seed_from_u64(dropout_seed), updates: Vec::new() }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        buffer: BufferId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let (g, b) = (self.params[gamma.0], self.params[beta.0]);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm2d(x, g, b, eps, BatchNormMode::Train)?;
                if let Some(stats) = stats {
                    self.updates.push(BatchNormUpdate { buffer, stats, momentum });
                }
                Ok(y)
            }
            Mode::Eval => {
                let running = self.buffers.get(buffer);
                Ok(self.tape.batchnorm2d(x, g, b, eps, BatchNormMode::Eval(running))?.0)
            }
        }
    }

    /// Identity unless training with `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Train && p > 0.0 {
            self.tape.dropout(x, p, &mut self.rng)
        } else {
            Ok(x)
        }
    }

    pub fn updates(&self) -> &[BatchNormUpdate] {
        &self.updates
    }

    /// Gradients for every parameter, ordered by [`ParamId`].
    pub fn param_grads(&self, mut grads: Gradients) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.take(v).ok_or_else(|| Error::MissingGradient(format!("param #{i}"))))
            .collect()
    }

    pub fn into_updates(self) -> Vec<BatchNormUpdate> {
        self.updates
    }
}

pub fn apply_updates(buffers: &mut Buffers, updates: &[BatchNormUpdate]) {
    for u in updates {
        buffers.get_mut(u.buffer).update(&u.stats, u.momentum);
    }
}
