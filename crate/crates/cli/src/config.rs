//! Flat `key = value` config files with `#` comments.

use std::path::Path;

use anyhow::{bail, Context, Result};
use indexmap::IndexMap;

/// Parses a config file, rejecting keys outside the allowed set.
pub fn parse(path: &Path, allowed: &[&str]) -> Result<IndexMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut out = IndexMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected 'key = value'", path.display(), lineno + 1);
        };
        let key = key.trim();
        let value = value.trim();
        if !allowed.contains(&key) {
            bail!("{}:{}: unknown config key '{key}'", path.display(), lineno + 1);
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            bail!("{}:{}: duplicate config key '{key}'", path.display(), lineno + 1);
        }
    }
    Ok(out)
}
