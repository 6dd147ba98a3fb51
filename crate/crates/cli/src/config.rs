//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tunnelwatch_core::events::CadaConfig;
use tunnelwatch_core::ingestion::StreamConfig;
use tunnelwatch_core::tracking::TrackerConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Event log path; stdout when unset.
    pub events: Option<PathBuf>,
    /// Optional per-detection track log.
    pub tracks: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stream: StreamConfig,
    pub tracker: TrackerConfig,
    pub cada: CadaConfig,
    pub output: OutputConfig,
    /// Default log filter when `TUNNELWATCH_LOG` is unset.
    pub log: Option<String>,
}

/// Reads `path` (or starts from defaults), applies every override in order
/// and deserializes the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for kv in overrides {
        apply_override(&mut doc, kv)?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Config(format!("config: {e}")))
}

/// `a.b.c=value`: the value is parsed as JSON when possible and taken as a
/// bare string otherwise. Missing intermediate objects are created.
pub fn apply_override(doc: &mut Value, kv: &str) -> Result<(), CliError> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{kv}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("--set has an invalid key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Config(format!(
                "--set {key}: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}
