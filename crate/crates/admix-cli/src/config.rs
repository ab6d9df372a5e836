//! Run configuration: a TOML document with `[train]`, `[model]`, and
//! `[data]` sections, every field optional. Unset fields take the built-in
//! defaults; unknown keys are rejected by name. A resolved configuration
//! serializes back to TOML with nothing left implicit, and that document
//! parses to the same configuration again.

use admix::data::{DataConfig, DatasetSpec};
use admix::model::{ArchDescriptor, ModelConfig};
use admix::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

/// Everything a run needs, fully validated.
#[derive(Debug)]
pub struct ResolvedRun {
    pub config: ConfigFile,
    pub dataset: DatasetSpec,
    pub descriptor: ArchDescriptor,
}

/// Parses a config document, applies `key=value` overrides (dotted paths
/// like `train.alpha=0.6`), validates every field, and resolves defaults.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ResolvedRun, CliError> {
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    for entry in overrides {
        apply_override(&mut table, entry)?;
    }
    let mut config: ConfigFile = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    config.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let dataset = config.data.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let descriptor = config
        .model
        .validate(dataset.channels, dataset.height, dataset.width, dataset.num_classes)
        .map_err(|e| CliError::Config(e.to_string()))?;
    config.train.resolve();
    Ok(ResolvedRun { config, dataset, descriptor })
}

fn apply_override(table: &mut toml::Table, entry: &str) -> Result<(), CliError> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {entry:?} is not key=value")))?;
    let path = path.trim();
    let value = parse_override_value(raw_value.trim());
    let segments: Vec<&str> = path.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} is empty")));
    }
    let mut current = table;
    for segment in &segments[..segments.len() - 1] {
        current = current
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key {path:?} crosses a non-table")))?;
    }
    current.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Interprets an override value as TOML if possible, falling back to a
/// string (so `mode=vanilla` works without quotes).
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(t) = wrapped.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

pub fn serialize_config(config: &ConfigFile) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

/// Content hash of the resolved configuration, used as the run id.
pub fn run_id(config: &ConfigFile) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serialize_config(config).as_bytes());
    hex::encode(hasher.finalize())[..12].to_string()
}

/// The manifest written into every run directory: the resolved config plus
/// run identity, sufficient to reproduce the run.
pub fn manifest_text(config: &ConfigFile, id: &str, out_dir: &str) -> String {
    let run = format!("[run]\nid = \"{id}\"\nout_dir = \"{}\"\n\n", out_dir.replace('\\', "/"));
    format!("{run}{}", serialize_config(config))
}

/// Reads a manifest back as a configuration, ignoring its `[run]` section.
pub fn parse_manifest_config(text: &str, overrides: &[String]) -> Result<ResolvedRun, CliError> {
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    table.remove("run");
    let body = toml::to_string(&table).expect("table serializes");
    parse_config(&body, overrides)
}
