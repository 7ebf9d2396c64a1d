//! Post-training inspection: which branch convolutions carry significant
//! weight, and error-versus-parameter-count tables.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::arch::{BranchPath, Network, Stage};
use crate::error::{Error, Result};

/// Threshold on normalized weight magnitude above which a convolution counts as active.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Set of weights the min/max normalization is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// Every convolution weight inside the analysed block.
    PerBlock,
    /// Every convolution weight inside every ChoiceNet block.
    PerNetwork,
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" | "per-block" => Ok(Granularity::PerBlock),
            "network" | "per-network" => Ok(Granularity::PerNetwork),
            other => Err(Error::Config(format!("unknown granularity `{other}` (expected block or network)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityEntry {
    /// 1-based module position within the block.
    pub module: usize,
    pub kernel: usize,
    /// 1-based position in the chain.
    pub conv_index: usize,
    pub path: BranchPath,
    /// Largest normalized `|w|` of the convolution.
    pub peak: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityReport {
    /// 1-based block index.
    pub block: usize,
    pub threshold: f64,
    pub granularity: Granularity,
    /// All weights in the normalization set had the same magnitude.
    pub degenerate: bool,
    pub min_abs: f64,
    pub max_abs: f64,
    pub entries: Vec<ActivityEntry>,
}

impl ActivityReport {
    pub fn active_count(&self) -> usize {
        self.entries.iter().filter(|e| e.active).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,module,kernel,conv_index,path,active\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{},{},{}", self.block, e.module, e.kernel, e.conv_index, e.path, e.active);
        }
        out
    }

    /// One line per module/kernel/path with `#` for active and `.` for
    /// inactive convolutions in chain order.
    pub fn to_grid(&self) -> String {
        let mut out = format!("block {} (threshold {}", self.block, self.threshold);
        if self.degenerate {
            out.push_str(", degenerate: all weights equal");
        }
        out.push_str(")\n");
        let mut i = 0;
        while i < self.entries.len() {
            let e = &self.entries[i];
            let mut cells = String::new();
            let mut j = i;
            while j < self.entries.len()
                && (self.entries[j].module, self.entries[j].kernel, self.entries[j].path) == (e.module, e.kernel, e.path)
            {
                cells.push(if self.entries[j].active { '#' } else { '.' });
                j += 1;
            }
            let _ = writeln!(out, "module {} k{} {:<6} {}", e.module, e.kernel, e.path.to_string(), cells);
            i = j;
        }
        out
    }
}

fn choice_blocks(network: &Network) -> Vec<&crate::arch::ChoiceBlock> {
    network
        .stages()
        .iter()
        .filter_map(|s| match s {
            Stage::Choice(b) => Some(b),
            _ => None,
        })
        .collect()
}

/// Magnitudes of all convolution weights whose parameter name starts with `prefix`.
fn conv_weight_magnitudes<'a>(network: &'a Network, prefix: &'a str) -> impl Iterator<Item = f64> + 'a {
    network
        .params
        .iter()
        .filter(move |(_, name, _)| name.starts_with(prefix) && name.ends_with(".weight"))
        .flat_map(|(_, _, t)| t.data().iter().map(|v| v.abs()))
}

/// Normalize `|w|` jointly over the chosen weight set with
/// `(|w| - min) / (max - min)` and mark each branch convolution of block
/// `block` (1-based) active when any of its normalized magnitudes exceeds
/// `threshold`. If `max == min` nothing is active and `degenerate` is set.
pub fn branch_activity(network: &Network, block: usize, threshold: f64, granularity: Granularity) -> Result<ActivityReport> {
    let blocks = choice_blocks(network);
    if blocks.is_empty() {
        return Err(Error::Config("branch activity needs a ChoiceNet architecture".into()));
    }
    let target = blocks.get(block.wrapping_sub(1)).ok_or_else(|| {
        Error::Config(format!("block {block} does not exist (network has {} blocks)", blocks.len()))
    })?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let prefixes: Vec<String> = match granularity {
        Granularity::PerBlock => vec![format!("block{block}.")],
        Granularity::PerNetwork => (1..=blocks.len()).map(|b| format!("block{b}.")).collect(),
    };
    let (mut min_abs, mut max_abs) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &prefixes {
        for m in conv_weight_magnitudes(network, p) {
            min_abs = min_abs.min(m);
            max_abs = max_abs.max(m);
        }
    }
    let degenerate = !(max_abs > min_abs);
    let range = max_abs - min_abs;

    let mut entries = Vec::new();
    for (mi, module) in target.modules.iter().enumerate() {
        for conv in module.branch_convs() {
            let peak = if degenerate {
                0.0
            } else {
                network.params.get(conv.weight).data().iter().map(|w| (w.abs() - min_abs) / range).fold(0.0, f64::max)
            };
            entries.push(ActivityEntry {
                module: mi + 1,
                kernel: conv.kernel,
                conv_index: conv.conv_index,
                path: conv.path,
                peak,
                active: !degenerate && peak > threshold,
            });
        }
    }
    Ok(ActivityReport { block, threshold, granularity, degenerate, min_abs, max_abs, entries })
}

/// One trained model's size and test error.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub model: String,
    pub params: usize,
    /// Test error rate in percent.
    pub error: f64,
}

/// CSV `model,params,error` sorted by parameter count (stable for ties).
pub fn params_vs_error_report(runs: &[RunSummary]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("params-vs-error report"));
    }
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by_key(|r| r.params);
    let mut out = String::from("model,params,error\n");
    for r in sorted {
        let _ = writeln!(out, "{},{},{}", r.model, r.params, r.error);
    }
    Ok(out)
}
