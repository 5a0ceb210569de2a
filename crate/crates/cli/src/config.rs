//! Pipeline configuration: UTF-8 `key = value` lines grouped under
//! `[section]` headers, `#` comments, no nesting.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use zeroseg_core::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(Error::format(
                        origin,
                        lineno as u64 + 1,
                        "unterminated section header",
                    ));
                };
                current = name.trim().to_string();
                if current.is_empty() {
                    return Err(Error::format(
                        origin,
                        lineno as u64 + 1,
                        "empty section name",
                    ));
                }
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    origin,
                    lineno as u64 + 1,
                    "expected key = value",
                ));
            };
            if current.is_empty() {
                return Err(Error::format(
                    origin,
                    lineno as u64 + 1,
                    "key outside any [section]",
                ));
            }
            let key = key.trim().to_string();
            let prev = sections
                .get_mut(&current)
                .expect("section inserted at header")
                .insert(key.clone(), value.trim().to_string());
            if prev.is_some() {
                return Err(Error::format(
                    origin,
                    lineno as u64 + 1,
                    format!("duplicate key {key} in [{current}]"),
                ));
            }
        }
        Ok(Config { sections })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::Config(format!("missing {key} in [{section}]")))
    }

    /// Parsed value, or the default when the key is absent.
    pub fn get_or<T>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("bad value for {key} in [{section}]: {e}"))),
        }
    }

    /// Comma-separated list, empty when the key is absent.
    pub fn list(&self, section: &str, key: &str) -> Vec<String> {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}
