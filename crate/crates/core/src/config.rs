//! Run configuration: a TOML document with a top-level `seed` and the
//! sections `[model]`, `[optim]`, `[data]` and `[output]`.

use std::env;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{preset_source, ModelConfig};
use crate::data::{
    cifar10_test_file, cifar10_train_files, generate_synthetic, load_cifar10_binary, load_cifar10_files,
    split_validation, subset, AugmentationPolicy, DatasetSplit, CIFAR_CLASSES, CIFAR_SIDE, DATA_ROOT_ENV,
};
use crate::error::{Error, Result};
use crate::train::SgdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training samples (synthetic: generated; CIFAR-10: subset size, all if unset).
    #[serde(default)]
    pub train_samples: Option<usize>,
    /// Validation samples held out from the training pool.
    #[serde(default)]
    pub val_samples: usize,
    /// Test samples (synthetic: generated; CIFAR-10: subset size, all if unset).
    #[serde(default)]
    pub test_samples: Option<usize>,
    /// Directory holding the CIFAR-10 binaries; falls back to the data-root environment variable.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub train_files: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub test_file: Option<PathBuf>,
    #[serde(default)]
    pub augmentation: Option<AugmentationPolicy>,
}

impl DataConfig {
    /// Augmentation used for training: explicit setting, else standard for
    /// CIFAR-10 and none for synthetic data.
    pub fn policy(&self) -> AugmentationPolicy {
        self.augmentation.unwrap_or(match self.source {
            DataSource::Cifar10 => AugmentationPolicy::STANDARD,
            DataSource::Synthetic => AugmentationPolicy::NONE,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// A fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: SgdConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    /// Exact text the configuration was parsed from.
    pub source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    seed: u64,
    model: toml::Table,
    #[serde(default)]
    optim: Option<SgdConfig>,
    data: DataConfig,
    #[serde(default)]
    output: OutputConfig,
}

/// Resolve a `[model]` table: `preset = "<name>"` loads a shipped preset and
/// any other keys override it; without a preset every required key must be given.
pub fn resolve_model(table: &toml::Table) -> Result<ModelConfig> {
    let mut merged = match table.get("preset") {
        Some(toml::Value::String(name)) => {
            preset_source(name)?.parse::<toml::Table>().map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?
        }
        Some(other) => return Err(Error::Config(format!("model.preset: expected a string, got {other}"))),
        None => toml::Table::new(),
    };
    for (k, v) in table {
        if k != "preset" {
            merged.insert(k.clone(), v.clone());
        }
    }
    let cfg: ModelConfig =
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(format!("[model]: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        let model = resolve_model(&raw.model)?;
        let optim = raw.optim.unwrap_or_default();
        optim.validate()?;
        let cfg = RunConfig { seed: raw.seed, model, optim, data: raw.data, output: raw.output, source: text.to_string() };
        cfg.validate_data()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn validate_data(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.train_samples.is_none() {
                    return Err(Error::Config("data.train_samples: required for synthetic data".into()));
                }
                if d.root.is_some() || d.train_files.is_some() || d.test_file.is_some() {
                    return Err(Error::Config("data.root/train_files/test_file only apply to cifar10".into()));
                }
            }
            DataSource::Cifar10 => {
                if self.model.resolution != CIFAR_SIDE || self.model.num_classes != CIFAR_CLASSES || self.model.in_channels != 3 {
                    return Err(Error::Config(format!(
                        "model: cifar10 needs in_channels = 3, resolution = {CIFAR_SIDE}, num_classes = {CIFAR_CLASSES}"
                    )));
                }
            }
        }
        if d.augmentation.is_some_and(|p| p.pad > 0 && p.pad >= self.model.resolution) {
            return Err(Error::Config("data.augmentation.pad: must be smaller than the resolution".into()));
        }
        Ok(())
    }

    /// Output directory: the command-line override, else `[output] dir`.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> Result<PathBuf> {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .ok_or_else(|| Error::Config("output.dir: not set (set it in the config or pass --out)".into()))
    }

    /// Build the dataset described by `[data]`.
    pub fn load_dataset(&self) -> Result<DatasetSplit> {
        let d = &self.data;
        let m = &self.model;
        match d.source {
            DataSource::Synthetic => {
                let n = d.train_samples.unwrap_or(0);
                let all = generate_synthetic(n + d.val_samples, m.num_classes, m.resolution, self.seed)?;
                let (train, val) = split_validation(all, d.val_samples, self.seed)?;
                let test = generate_synthetic(
                    d.test_samples.unwrap_or(0),
                    m.num_classes,
                    m.resolution,
                    self.seed ^ 0x7e57_7e57,
                )?;
                DatasetSplit::new(train, val, test, m.num_classes)
            }
            DataSource::Cifar10 => {
                let root = d.root.clone().or_else(|| env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
                let train_files = match (&d.train_files, &root) {
                    (Some(f), _) => f.iter().map(|p| resolve(root.as_deref(), p)).collect(),
                    (None, Some(r)) => cifar10_train_files(r),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "data.root: not set and {DATA_ROOT_ENV} is unset (or give data.train_files)"
                        )))
                    }
                };
                let test_file = match (&d.test_file, &root) {
                    (Some(f), _) => resolve(root.as_deref(), f),
                    (None, Some(r)) => cifar10_test_file(r),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "data.root: not set and {DATA_ROOT_ENV} is unset (or give data.test_file)"
                        )))
                    }
                };
                for f in &train_files {
                    if !f.is_file() {
                        return Err(Error::Config(format!("data.train_files: {} not found", f.display())));
                    }
                }
                if !test_file.is_file() {
                    return Err(Error::Config(format!("data.test_file: {} not found", test_file.display())));
                }
                let pool = load_cifar10_files(&train_files)?;
                let (train, val) = split_validation(pool, d.val_samples, self.seed)?;
                let train = match d.train_samples {
                    Some(n) => subset(train, n, self.seed ^ 1),
                    None => train,
                };
                let test = load_cifar10_binary(&test_file)?;
                let test = match d.test_samples {
                    Some(n) => subset(test, n, self.seed ^ 2),
                    None => test,
                };
                DatasetSplit::new(train, val, test, CIFAR_CLASSES)
            }
        }
    }
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

/// Shipped run configurations.
pub const RUN_PRESETS: &[(&str, &str)] = &[
    ("choicenet-tiny", include_str!("../configs/choicenet-tiny.toml")),
    ("choicenet-small", include_str!("../configs/choicenet-small.toml")),
    ("choicenet-mid", include_str!("../configs/choicenet-mid.toml")),
];

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[model]
preset = "choicenet-tiny"
pooling = "max"
[data]
source = "synthetic"
train_samples = 8
"#;

    #[test]
    fn preset_with_override() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model.pooling, crate::layers::PoolMode::Max);
        assert_eq!(cfg.model.resolution, 8);
        assert_eq!(cfg.optim, SgdConfig::default());
        let data = cfg.load_dataset().unwrap();
        assert_eq!(data.train.len(), 8);
        assert!(data.test.is_empty());
    }

    #[test]
    fn shipped_run_configs_parse() {
        for (name, text) in RUN_PRESETS {
            RunConfig::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn errors_name_the_key() {
        let no_seed = MINIMAL.replace("seed = 3", "");
        assert!(RunConfig::parse(&no_seed).unwrap_err().to_string().contains("seed"));
        let bad_line = MINIMAL.replace("train_samples = 8", "train_samples = \"eight\"");
        let msg = RunConfig::parse(&bad_line).unwrap_err().to_string();
        assert!(msg.contains("line 8") && msg.contains("train_samples"), "{msg}");
        let unknown = MINIMAL.replace("pooling = \"max\"", "poolng = \"max\"");
        assert!(RunConfig::parse(&unknown).unwrap_err().to_string().contains("poolng"));
        let no_train = MINIMAL.replace("train_samples = 8", "");
        assert!(RunConfig::parse(&no_train).unwrap_err().to_string().contains("data.train_samples"));
        let inline = "seed = 1\n[model]\nresolution = 8\n[data]\nsource = \"synthetic\"\ntrain_samples = 1\n";
        assert!(RunConfig::parse(inline).unwrap_err().to_string().contains("num_classes"));
    }

    #[test]
    fn missing_cifar_root_names_key() {
        let text = r#"
seed = 0
[model]
preset = "choicenet-small"
[data]
source = "cifar10"
train_files = ["/nonexistent/data_batch_1.bin"]
test_file = "/nonexistent/test_batch.bin"
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let msg = cfg.load_dataset().unwrap_err().to_string();
        assert!(msg.contains("data.train_files"), "{msg}");
    }
}
