//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are
//! lowercase ASCII identifiers (`[a-z0-9_-]`); each key may appear once.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: invalid key {key:?}")]
    BadKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
}

/// Parsed key/value pairs in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty()
                || !key.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
            {
                return Err(ConfigError::BadKey { line, key: key.into() });
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() }))
            .transpose()
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    /// Renders back to `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KeyValues::parse("# training\n\n iterations = 500 \nseed=7\n").unwrap();
        assert_eq!(kv.parsed::<usize>("iterations").unwrap(), Some(500));
        assert_eq!(kv.get("seed"), Some("7"));
        assert_eq!(kv.get("batch"), None);
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert_eq!(KeyValues::parse("a = 1\nnope").unwrap_err(), ConfigError::Syntax { line: 2 });
        assert!(matches!(KeyValues::parse("A = 1"), Err(ConfigError::BadKey { .. })));
        assert!(matches!(KeyValues::parse("a=1\na=2"), Err(ConfigError::Duplicate { line: 2, .. })));
        let kv = KeyValues::parse("a = x").unwrap();
        assert!(matches!(kv.parsed::<f64>("a"), Err(ConfigError::Value { .. })));
        assert_eq!(kv.check_known(&["b"]), Err(ConfigError::Unknown("a".into())));
    }
}
