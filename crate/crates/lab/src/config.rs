//! JSON configs with `--set key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{LabError, LabResult};

pub const SEED_ENV: &str = "AROMA_LAB_SEED";

pub fn read_json(path: &Path) -> LabResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::json(path, e))
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and kept as a string otherwise, so `--set name=run1` works
/// without quoting.
pub fn apply_override(target: &mut Value, assignment: &str) -> LabResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(LabError::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = target;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(LabError::Config(format!("cannot set {key}: {} is not an object", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Starts from `T::default()`, merges the file (if any) and then the
/// overrides. Unknown keys are rejected when `T` denies them.
pub fn load_config<T: DeserializeOwned + Serialize + Default>(file: Option<&Path>, sets: &[String]) -> LabResult<T> {
    let base = serde_json::to_value(T::default()).map_err(|e| LabError::Config(e.to_string()))?;
    load_config_from(base, file, sets)
}

/// `load_config` with an explicit starting value.
pub fn load_config_from<T: DeserializeOwned>(mut base: Value, file: Option<&Path>, sets: &[String]) -> LabResult<T> {
    if let Some(path) = file {
        merge(&mut base, read_json(path)?);
    }
    for s in sets {
        apply_override(&mut base, s)?;
    }
    serde_json::from_value(base).map_err(|e| LabError::Config(e.to_string()))
}

/// Recursive object merge; non-object values replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Explicit seed, then the environment, then 0.
pub fn resolve_seed(explicit: Option<u64>) -> LabResult<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| LabError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
