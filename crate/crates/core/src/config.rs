//! TOML experiment configs with dotted-path overrides.
//!
//! Parsing is strict: unknown keys anywhere in the document are errors.

use serde::Deserialize;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

/// Parses `KEY=VALUE`. The value is read as a TOML literal when possible
/// (`5.0`, `true`, `[16, 16]`, `"x"`) and as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

/// Sets `table[a][b][c] = value` for key `a.b.c`, creating tables on the way.
pub fn apply_override(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut cursor = table;
    for (depth, part) in parts.iter().enumerate() {
        let entry = cursor
            .entry((*part).to_owned())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override `{key}`: `{}` is not a table",
                    parts[..=depth].join(".")
                )))
            }
        };
    }
    cursor.insert(leaf.to_owned(), value);
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value.clone())?;
    }
    let config =
        ExperimentConfig::deserialize(Value::Table(table)).map_err(|e| Error::Config(e.message().to_owned()))?;
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("config is always representable as TOML")
}
