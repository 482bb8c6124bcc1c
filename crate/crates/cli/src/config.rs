//! TOML configuration files merged with command-line overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

pub fn load_table(path: Option<&Path>) -> Result<Table, CliError> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::config(format!("config {}: {}", path.display(), one_line(&e.to_string()))))
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::config(format!("empty key in '{path}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("'{p}' in '{path}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `key=value` with a TOML value; bare words are taken as strings.
pub fn parse_assignment(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got '{raw}'")))?;
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.trim().to_string(), parsed))
}

pub fn into_config<T: DeserializeOwned>(table: Table) -> Result<T, CliError> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("config: {}", one_line(&e.to_string()))))
}

pub fn to_toml<T: Serialize>(cfg: &T) -> Result<String, CliError> {
    toml::to_string_pretty(cfg).map_err(|e| CliError::runtime(format!("cannot serialize config: {e}")))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use infomax3d::training::{FinetuneConfig, PretrainConfig};

    #[test]
    fn assignments_parse_typed_values() {
        assert_eq!(parse_assignment("a.b=3").unwrap(), ("a.b".into(), Value::Integer(3)));
        assert_eq!(parse_assignment("x = 0.5").unwrap().1, Value::Float(0.5));
        assert_eq!(parse_assignment("k=multi3d_eq2").unwrap().1, Value::String("multi3d_eq2".into()));
        assert!(parse_assignment("novalue").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let p = PretrainConfig::default();
        let back: PretrainConfig = into_config(to_toml(&p).unwrap().parse::<Table>().unwrap()).unwrap();
        assert_eq!(back, p);
        let f = FinetuneConfig::default();
        let back: FinetuneConfig = into_config(to_toml(&f).unwrap().parse::<Table>().unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut t = Table::new();
        set_path(&mut t, "loss.temperature", Value::Float(0.2)).unwrap();
        assert!(into_config::<PretrainConfig>(t).is_err());
    }
}
