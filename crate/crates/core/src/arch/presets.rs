use crate::arch::config::ModelConfig;
use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("choicenet-tiny", include_str!("../../configs/models/choicenet-tiny.toml")),
    ("choicenet-small", include_str!("../../configs/models/choicenet-small.toml")),
    ("choicenet-mid", include_str!("../../configs/models/choicenet-mid.toml")),
    ("resnet-tiny", include_str!("../../configs/models/resnet-tiny.toml")),
    ("resnet-small", include_str!("../../configs/models/resnet-small.toml")),
    ("densenet-tiny", include_str!("../../configs/models/densenet-tiny.toml")),
    ("densenet-small", include_str!("../../configs/models/densenet-small.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// TOML text of a shipped model preset.
pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s).ok_or_else(|| {
        Error::Config(format!(
            "unknown model preset `{name}` (available: {})",
            preset_names().collect::<Vec<_>>().join(", ")
        ))
    })
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = toml::from_str(preset_source(name)?)
        .map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_validates() {
        for name in preset_names() {
            preset(name).unwrap();
        }
        assert!(preset("nope").is_err());
    }
}
