//! Flat `key=value` run configuration.
//!
//! Values come from three layers: argument defaults, then the config file,
//! then flags given on the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Keys never read from a file or written to the echo.
const SKIPPED: &[&str] = &["config"];

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
        })?;
        let key = key.trim().replace('-', "_");
        if key.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.exists() {
        return Err(CliError::MissingInput {
            artifact: "config file",
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn to_map<T: Serialize>(args: &T) -> Map<String, Value> {
    match serde_json::to_value(args).expect("argument structs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("argument structs serialize to objects"),
    }
}

/// Parses `text` as the same JSON type as `current`. Absent optional values
/// are paths or names and parse as strings; an empty value keeps them absent.
fn typed(key: &str, text: &str, current: &Value) -> Result<Value> {
    let bad = |what: &str| CliError::Config(format!("`{key}` expects {what}, got `{text}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(
            text.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?,
        ),
        Value::Number(n) if n.is_i64() => {
            Value::from(text.parse::<i64>().map_err(|_| bad("an integer"))?)
        }
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad("a finite number"))?
        }
        Value::Null if text.is_empty() => Value::Null,
        _ => Value::String(text.to_string()),
    })
}

/// Applies file values to `args` wherever `matches` shows the flag was not
/// given on the command line. Unknown keys are errors.
pub fn resolve<T: Serialize + DeserializeOwned>(
    args: &T,
    matches: &ArgMatches,
    file: &BTreeMap<String, String>,
) -> Result<T> {
    let mut map = to_map(args);
    for (key, text) in file {
        if SKIPPED.contains(&key.as_str()) {
            continue;
        }
        let current = map
            .get(key)
            .ok_or_else(|| CliError::Config(format!("unknown key `{key}` in config file")))?;
        if matches.value_source(key) == Some(ValueSource::CommandLine) {
            continue;
        }
        let v = typed(key, text, current)?;
        map.insert(key.clone(), v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))
}

/// The resolved arguments as sorted `key=value` lines, readable by
/// [`parse_config`].
pub fn echo<T: Serialize>(args: &T) -> String {
    let mut out = String::new();
    for (k, v) in to_map(args) {
        if SKIPPED.contains(&k.as_str()) {
            continue;
        }
        let text = match v {
            Value::Null => String::new(),
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k}={text}\n"));
    }
    out
}
