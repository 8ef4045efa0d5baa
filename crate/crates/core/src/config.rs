//! Ordered `key = value` text used by configuration files, resolved-config
//! echoes and checkpoint headers.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        KeyValues::default()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped,
    /// so values cannot contain `#`. A repeated key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if kv.get(key).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            kv.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    /// Inserts or replaces `key`, keeping the original position if present.
    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        match self.get(key) {
            Some(_) => self.parse_value(key),
            None => Ok(default),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Parses a boolean written as `true|false|1|0|yes|no`.
pub fn parse_bool(raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("expected a boolean, got {other:?}"))),
    }
}

/// Parses whitespace- or `x`-separated extents such as `3 32 32` or `3x32x32`.
pub fn parse_shape3(raw: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = raw
        .split(|c: char| c.is_whitespace() || c == 'x' || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad extent {t:?} in {raw:?}")))
        })
        .collect::<Result<_>>()?;
    <[usize; 3]>::try_from(dims)
        .map_err(|d| Error::Config(format!("expected 3 extents, got {d:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KeyValues::parse("# header\n a = 1 \n\nb=x y # trailing\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("x y"));
        assert_eq!(kv.len(), 2);
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut kv = KeyValues::new();
        kv.set("lr0", 0.1);
        kv.set("pool.local", "universal:fc1");
        kv.set("lr0", 0.2);
        assert_eq!(KeyValues::parse(&kv.to_string()).unwrap(), kv);
        assert_eq!(kv.get("lr0"), Some("0.2"));
    }

    #[test]
    fn shapes_accept_several_separators() {
        assert_eq!(parse_shape3("3 16 16").unwrap(), [3, 16, 16]);
        assert_eq!(parse_shape3("3x32x32").unwrap(), [3, 32, 32]);
        assert!(parse_shape3("3 4").is_err());
    }
}
