//! Command-line interface: `train`, `eval`, `gradcheck`, `analyze` and
//! `count-params`. Every command that writes files also writes a
//! `manifest.toml` recording the configuration hash, seed and version.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::analysis::{branch_activity, Granularity, DEFAULT_THRESHOLD};
use crate::arch::{count_parameters, preset, Network};
use crate::checkpoint;
use crate::checks::{run_suite, suite_csv, SuiteConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::{evaluate, fit, history_csv, FitOptions, Metrics, TrainState};

#[derive(Parser, Debug)]
#[command(name = "choicenet", version, about = "Train, check and inspect ChoiceNet image classifiers")]
pub struct Cli {
    /// Worker threads for convolution kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed (overrides the configuration's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes history.csv, metrics.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the dataset described by a configuration.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient checks of every layer, the module and a whole network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Model preset to check when no configuration is given.
        #[arg(long, default_value = "choicenet-tiny")]
        preset: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Entries sampled per parameter tensor of the whole network.
        #[arg(long, default_value_t = 8)]
        entries: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Branch-activity map of one block of a trained checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based block index.
        #[arg(long, default_value_t = 1)]
        block: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Normalization set: block or network.
        #[arg(long, default_value = "block")]
        granularity: String,
    },
    /// Print the analytic parameter count with a per-submodule breakdown.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Model preset to count when no configuration is given.
        #[arg(long)]
        preset: Option<String>,
    },
}

/// Parse arguments, run the command and return the process exit code:
/// 0 success, 1 failed check, 2 error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common, checkpoint, split } => cmd_eval(&common, &checkpoint, &split),
        Command::Gradcheck { common, preset, seeds, entries, tolerance } => {
            cmd_gradcheck(&common, &preset, seeds, entries, tolerance)
        }
        Command::Analyze { common, checkpoint, block, threshold, granularity } => {
            cmd_analyze(&common, &checkpoint, block, threshold, &granularity)
        }
        Command::CountParams { common, preset } => cmd_count_params(&common, preset.as_deref()),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_manifest(dir: &Path, command: &str, seed: u64, inputs: &[(&str, &[u8])]) -> Result<()> {
    let mut text = format!(
        "command = \"{command}\"\nseed = {seed}\nversion = \"{}\"\nthreads = {}\n",
        env!("CARGO_PKG_VERSION"),
        rayon::current_num_threads()
    );
    for (key, bytes) in inputs {
        text.push_str(&format!("{key}_sha256 = \"{}\"\n", sha256_hex(bytes)));
    }
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn metrics_row(split: &str, m: &Metrics) -> String {
    format!("{split},{:.17e},{:.17e},{}\n", m.loss, m.error_rate, m.samples)
}

const METRICS_HEADER: &str = "split,loss,error_rate,samples\n";

fn cmd_train(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    let out = cfg.output_dir(common.out.as_deref())?;
    let data = cfg.load_dataset()?;
    fs::create_dir_all(&out)?;
    write_manifest(&out, "train", cfg.seed, &[("config", cfg.source.as_bytes())])?;

    let network = Network::new(&cfg.model, cfg.seed)?;
    println!("model: {} parameters", network.params.numel());
    let mut state = TrainState::new(network, cfg.seed)?;
    let best = fit(
        &mut state,
        &data.train,
        &data.val,
        &data.norm,
        cfg.data.policy(),
        &cfg.optim,
        FitOptions::default(),
        |r| {
            let val = r.val.map_or(String::new(), |v| format!(" val_loss {:.4} val_err {:.2}%", v.loss, v.error_rate));
            println!(
                "epoch {:>4} lr {:.1e} train_loss {:.4} train_err {:.2}%{val}",
                r.epoch, r.lr, r.train.loss, r.train.error_rate
            );
        },
    )?;
    fs::write(out.join("history.csv"), history_csv(&state.history))?;
    checkpoint::save(&out.join("final.ckpt"), &state.network, state.epoch as u64)?;

    let eval_batch = cfg.optim.eval_batch_size;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push_str(&metrics_row("train", &evaluate(&state.network, &data.train, &data.norm, eval_batch)?));
    if !data.val.is_empty() {
        metrics.push_str(&metrics_row("val", &evaluate(&state.network, &data.val, &data.norm, eval_batch)?));
    }
    if !data.test.is_empty() {
        let test = evaluate(&state.network, &data.test, &data.norm, eval_batch)?;
        println!("test: loss {:.4} error {:.2}%", test.loss, test.error_rate);
        metrics.push_str(&metrics_row("test", &test));
    }
    if let Some(snap) = best {
        let mut best_net = state.network.clone();
        best_net.params = snap.params;
        best_net.buffers = snap.buffers;
        checkpoint::save(&out.join("best.ckpt"), &best_net, snap.epoch as u64 + 1)?;
        if !data.test.is_empty() {
            let test = evaluate(&best_net, &data.test, &data.norm, eval_batch)?;
            println!("best epoch {}: test error {:.2}%", snap.epoch, test.error_rate);
            metrics.push_str(&metrics_row("test_best", &test));
        }
    }
    fs::write(out.join("metrics.csv"), metrics)?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_eval(common: &Common, ckpt: &Path, split: &str) -> Result<i32> {
    let cfg = load_config(common)?;
    let loaded = checkpoint::load(ckpt)?;
    let data = cfg.load_dataset()?;
    let samples = match split {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => return Err(Error::Config(format!("--split: unknown split `{other}` (train, val or test)"))),
    };
    let m = evaluate(&loaded.network, samples, &data.norm, cfg.optim.eval_batch_size)?;
    let row = metrics_row(split, &m);
    print!("{METRICS_HEADER}{row}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.csv"), format!("{METRICS_HEADER}{row}"))?;
        let ckpt_bytes = fs::read(ckpt)?;
        write_manifest(out, "eval", cfg.seed, &[("config", cfg.source.as_bytes()), ("checkpoint", &ckpt_bytes)])?;
    }
    Ok(0)
}

fn cmd_gradcheck(common: &Common, preset_name: &str, seeds: u64, entries: usize, tolerance: f64) -> Result<i32> {
    let (model, source, seed0) = match &common.config {
        Some(_) => {
            let cfg = load_config(common)?;
            (cfg.model.clone(), cfg.source.clone(), cfg.seed)
        }
        None => (preset(preset_name)?, format!("preset = \"{preset_name}\"\n"), common.seed.unwrap_or(0)),
    };
    let mut suite = SuiteConfig { seeds: (seed0..seed0 + seeds).collect(), network_entries: Some(entries), ..Default::default() };
    suite.check.tolerance = tolerance;
    let results = run_suite(&model, &suite, |r| {
        let status = if r.report.passed() { "ok" } else { "FAIL" };
        println!("{status:>4} {:<28} seed {:<3} max_rel_err {:.3e}", r.target, r.seed, r.report.max_rel_err());
        for g in r.report.failures() {
            println!("       {} max_rel_err {:.3e}", g.name, g.max_rel_err);
        }
    })?;
    let passed = results.iter().all(|r| r.report.passed());
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.csv"), suite_csv(&results))?;
        write_manifest(out, "gradcheck", seed0, &[("config", source.as_bytes())])?;
    }
    println!("{}", if passed { "gradient check passed" } else { "gradient check FAILED" });
    Ok(if passed { 0 } else { 1 })
}

fn cmd_analyze(common: &Common, ckpt: &Path, block: usize, threshold: f64, granularity: &str) -> Result<i32> {
    let out = common.out.clone().ok_or_else(|| Error::Config("--out is required for analyze".into()))?;
    let granularity: Granularity = granularity.parse()?;
    let loaded = checkpoint::load(ckpt)?;
    let report = branch_activity(&loaded.network, block, threshold, granularity)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("activity.csv"), report.to_csv())?;
    fs::write(out.join("activity.txt"), report.to_grid())?;
    let ckpt_bytes = fs::read(ckpt)?;
    write_manifest(&out, "analyze", common.seed.unwrap_or(0), &[("checkpoint", &ckpt_bytes)])?;
    print!("{}", report.to_grid());
    println!("{} of {} branch convolutions active", report.active_count(), report.entries.len());
    Ok(0)
}

fn cmd_count_params(common: &Common, preset_name: Option<&str>) -> Result<i32> {
    let (model, source, seed) = match (preset_name, &common.config) {
        (Some(name), _) => (preset(name)?, format!("preset = \"{name}\"\n"), common.seed.unwrap_or(0)),
        (None, Some(_)) => {
            let cfg = load_config(common)?;
            (cfg.model, cfg.source, cfg.seed)
        }
        (None, None) => return Err(Error::Config("count-params needs --config or --preset".into())),
    };
    let analytic = count_parameters(&model)?;
    let enumerated = Network::new(&model, seed)?.enumerate_parameters();
    print!("{}", analytic.to_csv());
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("params.csv"), analytic.to_csv())?;
        write_manifest(out, "count-params", seed, &[("config", source.as_bytes())])?;
    }
    if analytic != enumerated {
        eprintln!("analytic count {} differs from enumerated {}", analytic.total, enumerated.total);
        return Ok(1);
    }
    Ok(0)
}
