//! Plain-text `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Keys may appear once. Every command consumes the keys it understands and
//! then calls [`Settings::finish`], which rejects whatever is left.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl Settings {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}:{line_no}: expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{line_no}: empty key")));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), line_no)) {
                return Err(Error::Config(format!(
                    "{source}:{line_no}: duplicate key `{key}` (first set on line {first})"
                )));
            }
        }
        Ok(Self { entries, source: source.to_string() })
    }

    /// Reads `path`, or returns empty settings when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!("{}:{line}: bad value `{v}` for `{key}`: {e}", self.source))
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self.take::<String>(key)? else { return Ok(None) };
        raw.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<T>()
                    .map_err(|e| Error::Config(format!("{}: bad item `{t}` in `{key}`: {e}", self.source)))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let unknown: Vec<String> = self
            .entries
            .iter()
            .map(|(k, (_, line))| format!("`{k}` (line {line})"))
            .collect();
        Err(Error::Config(format!("{}: unknown keys {}", self.source, unknown.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let mut s = Settings::parse("# header\nm = 64 # batch\n\neta1=1e-3\nhidden = 8, 8\n", "t").unwrap();
        assert_eq!(s.take::<usize>("m").unwrap(), Some(64));
        assert_eq!(s.take::<f64>("eta1").unwrap(), Some(1e-3));
        assert_eq!(s.take_list::<usize>("hidden").unwrap(), Some(vec![8, 8]));
        assert_eq!(s.take::<usize>("missing").unwrap(), None);
        s.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let s = Settings::parse("m = 1\nbogus = 2\n", "t").unwrap();
        let mut s2 = s.clone();
        s2.take::<usize>("m").unwrap();
        let err = s2.finish().unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(Settings::parse("m = 1\nm = 2\n", "t").is_err());
        assert!(Settings::parse("just words\n", "t").is_err());
        let mut s3 = Settings::parse("m = abc\n", "t").unwrap();
        assert!(matches!(s3.take::<usize>("m"), Err(Error::Config(_))));
    }
}
