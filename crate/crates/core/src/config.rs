//! Run configuration loading: JSON file, then the `ORIENT_ATTN_SEED`
//! environment variable, then dotted `key=value` overrides.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::train::RunConfig;

pub const SEED_ENV: &str = "ORIENT_ATTN_SEED";
pub const ECHO_FILE: &str = "config.echo.json";

/// Parses a config file. `env_seed` is the raw value of [`SEED_ENV`], if set.
pub fn parse_config(
    path: &Path,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides, env_seed)
}

pub fn parse_config_str(
    text: &str,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let file: Value =
        serde_json::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
    if !file.is_object() {
        return Err(Error::config("<file>", "top level must be a JSON object"));
    }
    let mut merged = serde_json::to_value(RunConfig::default())?;
    merge(&mut merged, file);

    if let Some(raw) = env_seed {
        let seed: u64 = raw.trim().parse().map_err(|_| {
            Error::config(
                SEED_ENV,
                format!("expected an unsigned integer, got `{raw}`"),
            )
        })?;
        merged["seed"] = Value::from(seed);
    }
    for o in overrides {
        apply_override(&mut merged, o)?;
    }

    let config: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." {
                "<root>".to_string()
            } else {
                path
            },
            e.into_inner().to_string(),
        )
    })?;
    config.validate()?;
    Ok(config)
}

/// Objects merge key by key; anything else replaces the default.
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

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, else as a bare string, so `model.variant=C` works unquoted.
/// The key must already exist in the defaults.
pub fn apply_override(config: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(spec, "empty override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = config;
    for part in key.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(key, "unknown key"))?;
    }
    *node = value;
    Ok(())
}

/// Canonical pretty JSON of the effective config; feeding it back through
/// [`parse_config_str`] yields the same config.
pub fn echo_json(config: &RunConfig) -> Result<String> {
    let mut s = serde_json::to_string_pretty(config)?;
    s.push('\n');
    Ok(s)
}

pub fn write_echo(config: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(ECHO_FILE);
    std::fs::write(&path, echo_json(config)?).map_err(|e| Error::io(path, e))
}

/// Every leaf key of the defaults in dotted form, for help text.
pub fn default_keys() -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => walk_map(prefix, m, out),
            _ => out.push(prefix.to_string()),
        }
    }
    fn walk_map(prefix: &str, m: &Map<String, Value>, out: &mut Vec<String>) {
        for (k, v) in m {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            walk(&key, v, out);
        }
    }
    let mut out = Vec::new();
    if let Ok(v) = serde_json::to_value(RunConfig::default()) {
        walk("", &v, &mut out);
    }
    out
}
