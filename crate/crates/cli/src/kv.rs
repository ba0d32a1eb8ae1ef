//! Flat key=value config files. Command-line flags take precedence over
//! file values, which take precedence over built-in defaults.

use anyhow::{bail, Context, Result};
use std::collections::HashMap;
use std::path::Path;

pub struct KvConfig {
    map: HashMap<String, String>,
}

impl KvConfig {
    pub fn empty() -> Self {
        KvConfig {
            map: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                );
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn get_string(&self, key: &str) -> Result<String> {
        self.map
            .get(key)
            .cloned()
            .with_context(|| format!("config key '{key}' not set"))
    }

    /// flag > file > default.
    pub fn resolve<T: std::str::FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{raw}': {e}")),
            None => Ok(default),
        }
    }

    /// flag > file > None.
    pub fn resolve_opt<T: std::str::FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.map.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{raw}': {e}")),
            None => Ok(None),
        }
    }

    /// Boolean file keys accept true/false/1/0.
    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => bail!("config key '{key}': bad boolean '{other}'"),
        }
    }

    /// Parse with a custom parser, falling back to `default`.
    pub fn get_parsed_with<T>(
        &self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        match self.map.get(key) {
            Some(raw) => parse(raw).with_context(|| format!("config key '{key}'")),
            None => Ok(default),
        }
    }
}
