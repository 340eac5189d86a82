//! The experiment configuration file: one TOML document mirroring the typed
//! configs of the model, trainer, and augmentation pipeline.
//!
//! Every key maps 1:1 onto a config field and unknown keys are hard errors,
//! so a typo in an experiment file fails fast instead of silently training
//! with a default. Individual fields can also be overridden through
//! environment variables prefixed [`ENV_PREFIX`]: `DAMAGEMAP_TRAIN__LR0=5e-4`
//! sets `train.lr0`, with `__` separating path segments (section names and
//! field names are case-insensitive in the variable).

use std::path::Path;

use crate::datapipe::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Environment-variable prefix for config overrides.
pub const ENV_PREFIX: &str = "DAMAGEMAP_";

/// Everything a training or evaluation run needs, with defaults
/// materialized for any section the file omits.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
}

impl PipelineConfig {
    /// Cross-section consistency plus each section's own validation.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.augment.crop_side != self.model.input_side {
            return Err(Error::Config(format!(
                "augment.crop_side {} must match model.input_side {}",
                self.augment.crop_side, self.model.input_side
            )));
        }
        Ok(())
    }

    /// Serializes the fully resolved config (for manifests and defaults
    /// dumps).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }
}

/// Splits `DAMAGEMAP_TRAIN__LR0` into the config path `["train", "lr0"]`.
/// Returns `None` for variables outside the prefix.
fn override_path(var: &str) -> Option<Vec<String>> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    if rest.is_empty() {
        return None;
    }
    Some(rest.split("__").map(|s| s.to_ascii_lowercase()).collect())
}

/// Parses an override value as a TOML literal, falling back to a string so
/// unquoted values like `cpu` still work.
fn parse_override(raw: &str) -> toml::Value {
    #[derive(serde::Deserialize)]
    struct Wrapper {
        v: toml::Value,
    }
    match toml::from_str::<Wrapper>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value, var: &str) -> Result<()> {
    let mut node = root;
    for segment in &path[..path.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("{var}: {segment} is not a config section"))
        })?;
        node = table
            .entry(segment.clone())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{var} does not address a config section")))?;
    table.insert(path.last().unwrap().clone(), value);
    Ok(())
}

/// Resolves a config from an optional TOML document plus environment-style
/// overrides. Unknown keys — from either source — are errors naming the key.
pub fn resolve_config(toml_text: Option<&str>, env: &[(String, String)]) -> Result<PipelineConfig> {
    let mut value: toml::Value = match toml_text {
        Some(text) => toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?,
        None => toml::Value::Table(toml::map::Map::new()),
    };
    let mut overrides: Vec<(&String, &String)> = env
        .iter()
        .filter(|(k, _)| override_path(k).is_some())
        .map(|(k, v)| (k, v))
        .collect();
    // Deterministic application order regardless of environment iteration.
    overrides.sort();
    for (var, raw) in overrides {
        let path = override_path(var).unwrap();
        set_path(&mut value, &path, parse_override(raw), var)?;
    }
    let config: PipelineConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("config error: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Loads the config file (when given) and applies `DAMAGEMAP_*` overrides
/// from the process environment. With no file, starts from defaults.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let env: Vec<(String, String)> = std::env::vars().collect();
    resolve_config(text.as_deref(), &env)
}
