//! Flat `key=value` configuration files.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{invalid, Result};

/// Parses `key=value` lines in order. Blank lines and `#` comments are
/// skipped; a repeated key or a line without `=` is an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("line {}", lineno + 1), format!("expected key=value, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(invalid(format!("line {}", lineno + 1), "empty key"));
        }
        if seen.insert(k.to_string(), lineno).is_some() {
            return Err(invalid(k, "given more than once"));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Typed access to parsed pairs that tracks which keys were consumed.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    values: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            values: parse_pairs(text)?.into_iter().collect(),
        })
    }

    /// Removes and parses `key`, or returns `default`.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.values.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| invalid(key, format!("cannot parse `{v}`"))),
        }
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.values.into_keys().next() {
            Some(k) => Err(invalid(k, "unknown key")),
            None => Ok(()),
        }
    }
}
