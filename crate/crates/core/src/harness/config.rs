//! Run configuration files: JSON, or `key = value` lines with dotted keys.
//! Either way the result is layered over the defaults and unknown keys are
//! rejected when the merged value is deserialized.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Parses one `key = value` line body into a JSON value. Anything that is not
/// valid JSON is taken as a bare string.
fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("key '{key}' descends into a non-table value")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("key '{key}' descends into a non-table value")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `patch` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses config text. Text whose first non-blank character is `{` is JSON.
pub fn parse_config_text(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| Error::Config(format!("JSON: {e}")));
    }
    let mut root = Value::Object(Map::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
        set_path(&mut root, k.trim(), parse_scalar(v))?;
    }
    Ok(root)
}

/// Defaults, then the file (if any), then `overrides` (`key=value` each).
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        merge(&mut value, parse_config_text(&text)?);
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        let mut patch = Value::Object(Map::new());
        set_path(&mut patch, k.trim(), parse_scalar(v))?;
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}
