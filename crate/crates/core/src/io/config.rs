//! Plain-text configuration: `key = value` lines, `#` comments.
//!
//! Values are typed on read. Every accessor marks its key as consumed, and
//! [`Config::reject_unknown`] fails on anything nobody asked for, which is
//! how misspelled keys surface.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_CONFIG: &str = "t2v.conf";

#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Line(usize),
    Flag,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => write!(f, "command line"),
        }
    }
}

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, (String, Origin)>,
    used: RefCell<BTreeSet<String>>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {n}: expected `key = value`, got {line:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(Error::Config(format!("line {n}: bad key {k:?}")));
            }
            if let Some((_, prev)) = cfg.values.get(k) {
                return Err(Error::Config(format!("line {n}: {k} already set on {prev}")));
            }
            cfg.values.insert(k.to_string(), (v.to_string(), Origin::Line(n)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Command-line override; replaces any file value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config(format!("bad key {key:?}")));
        }
        self.values.insert(key.to_string(), (value.to_string(), Origin::Flag));
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn typed<V: FromStr>(&self, key: &str, kind: &str) -> Result<Option<V>> {
        self.used.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some((v, origin)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{origin}: {key} = {v:?} is not a valid {kind}"))),
        }
    }

    pub fn int(&self, key: &str, default: i64) -> Result<i64> {
        Ok(self.typed(key, "integer")?.unwrap_or(default))
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed(key, "non-negative integer")?.unwrap_or(default))
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.typed(key, "non-negative integer")?.unwrap_or(default))
    }

    pub fn float(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.typed(key, "number")?.unwrap_or(default))
    }

    pub fn string(&self, key: &str, default: &str) -> Result<String> {
        Ok(self.typed(key, "string")?.unwrap_or_else(|| default.to_string()))
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        self.used.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(default),
            Some((v, origin)) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{origin}: {key} = {v:?} is not a boolean"))),
            },
        }
    }

    /// Errors on the first key no accessor has read.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.values.iter().find(|(k, _)| !used.contains(*k)) {
            None => Ok(()),
            Some((k, (_, origin))) => Err(Error::Config(format!("{origin}: unknown key {k:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_types() {
        let c = Config::parse("# header\nseed = 7\n\nlr=0.5 # trailing\nname =  visible \nflag = yes\n").unwrap();
        assert_eq!(c.u64("seed", 0).unwrap(), 7);
        assert_eq!(c.float("lr", 0.0).unwrap(), 0.5);
        assert_eq!(c.string("name", "").unwrap(), "visible");
        assert!(c.bool("flag", false).unwrap());
        assert_eq!(c.int("absent", -3).unwrap(), -3);
        c.reject_unknown().unwrap();
    }

    #[test]
    fn errors_name_lines() {
        let e = Config::parse("a = 1\n\nnot a pair\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = Config::parse("a = 1\na = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("line 1"), "{e}");
        let c = Config::parse("x = 1\nepochs = ten\n").unwrap();
        let e = c.usize("epochs", 1).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = c.reject_unknown().unwrap_err().to_string();
        assert!(e.contains("\"x\"") && e.contains("line 1"), "{e}");
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::parse("epochs = 3\n").unwrap();
        c.set("epochs", "9").unwrap();
        assert_eq!(c.usize("epochs", 0).unwrap(), 9);
        c.set("bad", "x").unwrap();
        assert!(c.reject_unknown().unwrap_err().to_string().contains("command line"));
        assert!(c.set("", "1").is_err());
    }
}
