//! `--config FILE` support. Each `key=value` line becomes `--key=value` on the
//! command line unless that flag was passed explicitly, so clap still
//! rejects unknown keys. `key=true` becomes a bare switch and `key=false`
//! is dropped.

use std::ffi::OsString;

use anyhow::{Context, Result};
use halluguard::config::parse_pairs;

pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some((pos, path)) = find_config(&strs) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(halluguard::Error::from)
        .with_context(|| format!("reading config {path}"))?;
    let pairs = parse_pairs(&text).with_context(|| format!("parsing config {path}"))?;
    let mut injected = Vec::new();
    for (k, v) in pairs {
        let flag = format!("--{}", k.replace('_', "-"));
        let given = strs.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if given {
            continue;
        }
        match v.as_str() {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            _ => injected.push(OsString::from(format!("{flag}={v}"))),
        }
    }
    let mut out = args;
    let at = pos.min(out.len());
    out.splice(at..at, injected);
    Ok(out)
}

/// Index of the `--config` flag and the path it names.
fn find_config(args: &[String]) -> Option<(usize, String)> {
    for (i, a) in args.iter().enumerate() {
        if a == "--" {
            return None;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some((i, p.to_string()));
        }
        if a == "--config" {
            return args.get(i + 1).map(|p| (i, p.clone()));
        }
    }
    None
}
