//! TOML config files and `section.key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cossl_core::TrainConfig;

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses config text; unknown keys and type errors report their line.
pub fn parse_config(text: &str, origin: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        let msg = e.message().trim_end().to_string();
        match line {
            Some(l) => anyhow!("{origin}:{l}: {msg}"),
            None => anyhow!("{origin}: {msg}"),
        }
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text, &path.display().to_string())
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// literal, falling back to a bare string (`mode=vanilla`).
pub fn apply_override(cfg: &TrainConfig, assignment: &str) -> Result<TrainConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form section.key=value"))?;
    let (key, raw) = (key.trim(), raw.trim());
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| anyhow!("override key `{key}` must be section.key"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = toml::Table::try_from(cfg).context("serializing config")?;
    let sec = table
        .get_mut(section)
        .and_then(|s| s.as_table_mut())
        .ok_or_else(|| anyhow!("unknown config section `{section}`"))?;
    if !sec.contains_key(field) {
        bail!("unknown config key `{key}`");
    }
    sec.insert(field.to_string(), value);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("override `{key}`: {}", e.message().trim_end()))
}

/// The resolved config as TOML text.
pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    toml::to_string_pretty(cfg).context("serializing config")
}

/// Config file (or defaults) plus overrides, validated.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        cfg = apply_override(&cfg, o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
