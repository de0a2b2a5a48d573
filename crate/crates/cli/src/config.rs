//! Settings resolution: command-line flags, then a `key=value` config file,
//! then `DLMFP_SEED` for the seed, then built-in defaults.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const SEED_ENV: &str = "DLMFP_SEED";

/// Values read from a config file, keyed by flag name without dashes.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got {line:?}", n + 1);
            };
            let key = key.trim().trim_start_matches("--").replace('_', "-");
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// `flag` if given, else the file's value for `key`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow::anyhow!("config key {key}={v:?}: {e}")))
            .transpose()
    }

    pub fn flag(&self, given: bool, key: &str) -> Result<bool> {
        Ok(given || self.pick::<bool>(None, key)?.unwrap_or(false))
    }

    /// Seed from the flag, the file, `DLMFP_SEED`, or 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = self.pick(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer")),
            Err(_) => Ok(0),
        }
    }
}

/// Comma-separated list.
pub fn parse_list<T>(text: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("list item {s:?}: {e}")))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("empty list {text:?}");
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let f = ConfigFile::parse("# comment\ngen-len = 12\nsteps=4\nrule_task=true\n").unwrap();
        assert_eq!(f.pick::<usize>(None, "gen-len").unwrap(), Some(12));
        assert_eq!(f.pick(Some(3usize), "steps").unwrap(), Some(3));
        assert_eq!(f.pick::<usize>(None, "steps").unwrap(), Some(4));
        assert!(f.flag(false, "rule-task").unwrap());
        assert!(f.pick::<usize>(None, "tau").unwrap().is_none());
        assert!(ConfigFile::parse("nonsense").is_err());
        assert!(ConfigFile::parse("steps=x").unwrap().pick::<usize>(None, "steps").is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("1, 2,5").unwrap(), vec![1, 2, 5]);
        assert!(parse_list::<usize>("").is_err());
    }
}
