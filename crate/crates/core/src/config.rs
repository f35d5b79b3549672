//! Flat key=value configuration files with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed configuration; later assignments override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }

    /// Flag-style override.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::invalid("config", format!("key {key} has unparsable value `{v}`"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    /// Canonical re-rendering (sorted keys) for run snapshots.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("test.cfg")
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = Config::parse("# header\nepochs = 40\nseed=3 # trailing\n\nepochs=41\n", &origin()).unwrap();
        assert_eq!(c.get("epochs"), Some("41"));
        assert_eq!(c.get_parsed::<u64>("seed").unwrap(), Some(3));
        assert_eq!(c.get("missing"), None);
    }

    #[test]
    fn rejects_bad_lines_and_values() {
        assert!(Config::parse("not a kv line\n", &origin()).is_err());
        let c = Config::parse("x=abc\n", &origin()).unwrap();
        assert!(c.get_parsed::<f64>("x").is_err());
    }

    #[test]
    fn render_round_trips() {
        let c = Config::parse("b=2\na=1\n", &origin()).unwrap();
        let r = c.render();
        assert_eq!(r, "a=1\nb=2\n");
        let c2 = Config::parse(&r, &origin()).unwrap();
        assert_eq!(c2.render(), r);
    }
}
