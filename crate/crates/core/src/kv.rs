//! Flat `key = value` text used for configs, metrics, logs and checkpoint metadata.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs. Keys are consumed with [`KvMap::take`] so that
/// leftovers can be reported as unknown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    /// Parse lines of `key = value`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{source}:{}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(&location, "expected `key = value`"))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::parse(&location, "empty key"));
            }
            if entries.insert(key.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(&location, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { source: source.to_string(), entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Remove and parse `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::parse(format!("{}:{line}", self.source), format!("`{key}`: {e}"))),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Error if any keys were not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.iter().next() {
            return Err(Error::parse(format!("{}:{line}", self.source), format!("unknown key `{k}`")));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }
}

/// Render `key = value` lines in the given order.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Comma-separated list, e.g. `16,32,64`.
pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

pub fn format_list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_unknown_keys() {
        let mut kv = KvMap::parse("# comment\nlr = 0.001\n\nseed=7 # trailing\nfoo = bar\n", "cfg").unwrap();
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.take::<u64>("seed").unwrap(), Some(7));
        assert_eq!(kv.take::<u64>("missing").unwrap(), None);
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("foo") && err.contains("cfg:5"), "{err}");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(KvMap::parse("novalue\n", "x").is_err());
        assert!(KvMap::parse("a = 1\na = 2\n", "x").is_err());
        let mut kv = KvMap::parse("n = abc\n", "x").unwrap();
        assert!(kv.take::<u32>("n").is_err());
    }

    #[test]
    fn lists_round_trip() {
        let v: Vec<usize> = parse_list("16, 32,64").unwrap();
        assert_eq!(v, vec![16, 32, 64]);
        assert_eq!(format_list(&v), "16,32,64");
    }
}
