//! TOML configs: file, then flag overrides, then `--set key=value`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    /// Key that `--seed` writes, if the command takes a seed.
    fn seed_override(_seed: u64) -> Option<(&'static str, Value)> {
        None
    }

    /// Key that `--engine` writes, if the command has an engine choice.
    fn engine_key() -> Option<&'static str> {
        None
    }

    /// Cross-field checks beyond what the types enforce.
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Parse an override value as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override {key:?}: {p:?} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub struct Overrides<'a> {
    pub seed: Option<u64>,
    pub engine: Option<&'a str>,
    pub set: &'a [String],
}

pub fn load<C: CommandConfig>(path: Option<&Path>, ov: &Overrides) -> CliResult<C> {
    let mut table = Table::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Parsing the file on its own keeps line numbers in schema errors.
        toml::from_str::<C>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        table = text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = ov.seed {
        let (k, v) = C::seed_override(seed).ok_or_else(|| CliError::Config("this command takes no seed".into()))?;
        set_path(&mut table, k, v)?;
    }
    if let Some(engine) = ov.engine {
        let k = C::engine_key().ok_or_else(|| CliError::Config("this command has no engine option".into()))?;
        set_path(&mut table, k, Value::String(engine.into()))?;
    }
    for kv in ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {kv:?} is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let cfg: C = Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.check().map_err(CliError::Config)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_toml_or_string() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_value("periodic"), Value::String("periodic".into()));
        assert_eq!(parse_value("\"x\""), Value::String("x".into()));
    }

    #[test]
    fn dotted_paths_create_tables() {
        let mut t = Table::new();
        set_path(&mut t, "grid.height", Value::Integer(4)).unwrap();
        assert_eq!(t["grid"]["height"], Value::Integer(4));
        t.insert("x".into(), Value::Integer(1));
        assert!(set_path(&mut t, "x.y", Value::Integer(1)).is_err());
    }
}
