//! Flat key-value config files with `CRYSTAL_`-prefixed environment
//! overrides.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "CRYSTAL_";

/// Parses an override value as a TOML scalar, falling back to a plain string
/// so paths and addresses need no quoting.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Loads `T` from an optional TOML file, then applies environment variables
/// named `CRYSTAL_<KEY>` for every key in `keys`.
pub fn load<T: DeserializeOwned>(
    path: Option<&Path>,
    keys: &[&str],
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (name, raw) in env {
        let Some(key) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = key.to_ascii_lowercase();
        if keys.contains(&key.as_str()) {
            table.insert(key, parse_value(&raw));
        }
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}
