//! `key=value` text files used for agent and scenario configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("invalid value for `{key}`: {value}")]
    Invalid { key: String, value: String },
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate { line: i + 1, key });
        }
    }
    Ok(out)
}

/// Rejects keys outside `allowed`.
pub fn check_keys(map: &BTreeMap<String, String>, allowed: &[&str]) -> Result<(), ConfigError> {
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ConfigError::UnknownKey(k.clone())),
        None => Ok(()),
    }
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_trims() {
        let m = parse_kv("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(parse_kv("nope"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(parse_kv("a=1\na=2"), Err(ConfigError::Duplicate { .. })));
        let m = parse_kv("zzz=1").unwrap();
        assert_eq!(check_keys(&m, &["a"]), Err(ConfigError::UnknownKey("zzz".into())));
    }
}
