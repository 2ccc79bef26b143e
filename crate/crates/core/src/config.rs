//! Line-oriented `key = value` configuration files.
//!
//! ```text
//! # comments start with '#', blank lines are ignored
//! seed = 7
//! ransac_iters = 256   # trailing comments are allowed
//! stages = sa,da,rc,mv
//! ```
//!
//! Keys are `[a-z0-9_.-]+`. Values are the trimmed remainder of the line and
//! may not be empty. A key may appear at most once.

use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate key '{key}'")]
    Duplicate { line: usize, key: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': cannot parse '{value}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Parsed entries in key order, each remembering its source line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b"_.-".contains(&b))
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    reason: "expected 'key = value'".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(ConfigError::Syntax {
                    line,
                    reason: format!("invalid key '{key}'"),
                });
            }
            if value.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    reason: format!("empty value for '{key}'"),
                });
            }
            if entries
                .insert(key.to_string(), (line, value.to_string()))
                .is_some()
            {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }

    /// Later values win.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }
}

/// Parses `value` as `T`, attributing failures to `key`.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Accepts `true/false`, `yes/no`, `on/off`, `1/0`.
pub fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected a boolean".into(),
        }),
    }
}

/// Comma-separated list, empty items rejected.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|item| parse_value(key, item.trim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv =
            KeyValues::parse("# header\n\n seed = 7 # trailing\nlr=0.01\nviews = 0, 3\n").unwrap();
        assert_eq!(kv.len(), 3);
        assert_eq!(kv.get("seed"), Some("7"));
        assert_eq!(kv.get("lr"), Some("0.01"));
        assert_eq!(
            parse_list::<usize>("views", kv.get("views").unwrap()).unwrap(),
            vec![0, 3]
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            KeyValues::parse("seed 7"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a = 1\nSeed = 2"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            KeyValues::parse("seed ="),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            KeyValues::parse("a=1\na=2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn typed_values() {
        assert!(parse_bool("x", "On").unwrap());
        assert!(!parse_bool("x", "0").unwrap());
        assert!(parse_bool("x", "maybe").is_err());
        assert_eq!(parse_value::<f64>("x", "2.5").unwrap(), 2.5);
        assert!(matches!(
            parse_value::<u32>("x", "-1"),
            Err(ConfigError::BadValue { .. })
        ));
    }
}
