//! `key = value` config files: one pair per line, `#` starts a comment,
//! unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "line {}: unknown key '{key}' (allowed: {})",
                lineno + 1,
                allowed.join(", ")
            )));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Typed view over a parsed key/value map.
pub struct Kv {
    map: BTreeMap<String, String>,
}

impl Kv {
    pub fn from_text(text: &str, allowed: &[&str]) -> Result<Self> {
        Ok(Kv {
            map: parse_kv(text, allowed)?,
        })
    }

    pub fn from_file(path: &Path, allowed: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, allowed).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .map
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))?;
        v.parse()
            .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
    }

    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("key '{key}': bad entry '{s}'")))
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = Kv::from_text(
            "# header\n  lr = 0.01  # trailing\n\nepochs=5\n",
            &["lr", "epochs"],
        )
        .unwrap();
        assert_eq!(kv.get::<f64>("lr", 0.0).unwrap(), 0.01);
        assert_eq!(kv.get::<usize>("epochs", 0).unwrap(), 5);
        assert_eq!(kv.get::<usize>("absent", 9).unwrap(), 9);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(Kv::from_text("lr = 0.1\nlearning_rate = 0.2\n", &["lr"]).is_err());
        assert!(Kv::from_text("lr = 0.1\nlr = 0.2\n", &["lr"]).is_err());
        assert!(Kv::from_text("just a line\n", &["lr"]).is_err());
    }

    #[test]
    fn typed_accessors() {
        let kv = Kv::from_text("channels = 8, 16,32\nseed = 7\n", &["channels", "seed"]).unwrap();
        assert_eq!(
            kv.get_usize_list("channels", &[1]).unwrap(),
            vec![8, 16, 32]
        );
        assert_eq!(kv.require::<u64>("seed").unwrap(), 7);
        assert!(kv.require::<u64>("nope").is_err());
        assert_eq!(kv.get::<u64>("absent", 4).unwrap(), 4);
    }
}
