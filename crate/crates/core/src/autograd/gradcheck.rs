//! Central finite-difference gradient checking.
//!
//! The relative error of an entry is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps entries whose true gradient is (near) zero from reporting
//! pure rounding noise as a 100% error.
//!
//! ReLU and max-pool are only piecewise smooth. When the `±step` perturbation
//! of an entry moves any ReLU input across zero or changes any max-pool
//! winner, the central difference straddles a kink and does not estimate the
//! derivative; such entries are skipped and counted instead of compared.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Buffers, Forward, Mode, ParamStore};
use crate::tensor::Tensor;

/// Dropout masks are drawn from this seed on every evaluation so that all
/// perturbed forwards see the same mask as the analytic pass.
const CHECK_DROPOUT_SEED: u64 = 0x5eed;

/// A model with a scalar objective that can be perturbed parameter by parameter.
pub trait Differentiable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn buffers(&self) -> &Buffers;
    fn objective(&self, f: &mut Forward<'_>, input: Var) -> Result<Var>;

    fn check_mode(&self) -> Mode {
        Mode::Train
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub denominator_floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub check_input: bool,
    pub sample_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            denominator_floor: 1e-3,
            max_entries_per_tensor: None,
            check_input: true,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries skipped because the perturbation crossed a kink.
    pub skipped_kinks: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("param_group,max_rel_err,pass\n");
        for g in &self.groups {
            let _ = writeln!(out, "{},{:e},{}", g.name, g.max_rel_err, g.passed);
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<M: Differentiable>(model: &M, input: &Tensor) -> Result<(f64, Vec<u64>)> {
    let mut f = Forward::new(model.params(), model.buffers(), model.check_mode(), CHECK_DROPOUT_SEED);
    let x = f.input(input.clone());
    let loss = model.objective(&mut f, x)?;
    Ok((f.tape.value(loss).item()?, f.tape.branch_pattern()))
}

/// Central difference, or `None` when either side lies on a different smooth piece.
fn central_difference(plus: (f64, Vec<u64>), minus: (f64, Vec<u64>), pattern: &[u64], h: f64) -> Option<f64> {
    (plus.1 == pattern && minus.1 == pattern).then(|| (plus.0 - minus.0) / (2.0 * h))
}

fn chosen_entries(len: usize, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.max_entries_per_tensor {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compare backpropagated gradients with central differences for every
/// parameter tensor (and optionally the input).
pub fn grad_check<M: Differentiable>(model: &mut M, input: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::Config(format!("grad_check step must be > 0, got {}", cfg.step)));
    }
    let (param_grads, input_grad, pattern) = {
        let mut f = Forward::new(model.params(), model.buffers(), model.check_mode(), CHECK_DROPOUT_SEED);
        let x = f.tape.leaf(input.clone());
        let loss = model.objective(&mut f, x)?;
        let mut grads = f.tape.backward(loss)?;
        let input_grad = grads.take(x);
        (f.param_grads(grads)?, input_grad, f.tape.branch_pattern())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let h = cfg.step;
    let mut groups = Vec::new();

    let ids: Vec<_> = model.params().ids().collect();
    for (id, analytic) in ids.into_iter().zip(&param_grads) {
        let name = model.params().name(id).to_string();
        let entries = chosen_entries(analytic.numel(), cfg, &mut rng);
        let mut max_err: f64 = 0.0;
        let (mut checked, mut skipped) = (0, 0);
        for &i in &entries {
            let original = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = original + h;
            let plus = evaluate(model, input);
            model.params_mut().get_mut(id).data_mut()[i] = original - h;
            let minus = evaluate(model, input);
            model.params_mut().get_mut(id).data_mut()[i] = original;
            match central_difference(plus?, minus?, &pattern, h) {
                Some(numeric) => {
                    max_err = max_err.max(relative_error(analytic.data()[i], numeric, cfg.denominator_floor));
                    checked += 1;
                }
                None => skipped += 1,
            }
        }
        groups.push(GroupReport {
            name,
            max_rel_err: max_err,
            checked,
            skipped_kinks: skipped,
            passed: max_err < cfg.tolerance,
        });
    }

    if cfg.check_input {
        if let Some(analytic) = input_grad {
            let mut x = input.clone();
            let mut max_err: f64 = 0.0;
            let (mut checked, mut skipped) = (0, 0);
            for i in chosen_entries(x.numel(), cfg, &mut rng) {
                let original = x.data()[i];
                x.data_mut()[i] = original + h;
                let plus = evaluate(model, &x)?;
                x.data_mut()[i] = original - h;
                let minus = evaluate(model, &x)?;
                x.data_mut()[i] = original;
                match central_difference(plus, minus, &pattern, h) {
                    Some(numeric) => {
                        max_err = max_err.max(relative_error(analytic.data()[i], numeric, cfg.denominator_floor));
                        checked += 1;
                    }
                    None => skipped += 1,
                }
            }
            groups.push(GroupReport {
                name: "input".into(),
                max_rel_err: max_err,
                checked,
                skipped_kinks: skipped,
                passed: max_err < cfg.tolerance,
            });
        }
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, groups })
}

/// Build a model from `seed`, draw a standard-normal input of `input_shape`
/// from the same seed, and check it.
pub fn grad_check_built<M, B>(
    builder: B,
    input_shape: &[usize],
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    M: Differentiable,
    B: FnOnce(u64) -> Result<M>,
{
    let mut model = builder(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let input = Tensor::randn(input_shape.to_vec(), 1.0, &mut rng)?;
    let cfg = GradCheckConfig { sample_seed: seed, ..cfg.clone() };
    grad_check(&mut model, &input, &cfg)
}
