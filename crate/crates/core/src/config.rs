//! Flat `key = value` run configuration with layered precedence:
//! built-in defaults, then a config file, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Starts from `defaults`; only these keys may be set later.
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        Self {
            values: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into().trim().to_string();
                Ok(())
            }
            None => Err(Error::config(format!(
                "unknown key `{key}` (known: {})",
                self.values.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    /// Applies `KEY=VALUE` strings.
    pub fn merge_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{pair}` is not KEY=VALUE")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Copies every entry of `values` whose key is known here.
    pub fn merge_known(&mut self, values: &BTreeMap<String, String>) {
        for (k, v) in values {
            if let Some(slot) = self.values.get_mut(k) {
                slot.clone_from(v);
            }
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| Error::config(format!("bad value `{raw}` for `{key}`: {e}")))
    }

    /// `None` for an empty value.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.raw(key)?.is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::config(format!("bad item `{s}` in `{key}`: {e}")))
            })
            .collect()
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Resolved configuration in file form.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Config {
        Config::with_defaults(&[("lr", "0.001"), ("k", "5"), ("hidden", "8,8"), ("eta", "")])
    }

    #[test]
    fn precedence_and_parsing() {
        let mut c = base();
        c.merge_text("# comment\nlr = 0.01\nk=7 # trailing\n\n")
            .unwrap();
        c.merge_overrides(["k=9"]).unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.01);
        assert_eq!(c.get::<usize>("k").unwrap(), 9);
        assert_eq!(c.list::<usize>("hidden").unwrap(), vec![8, 8]);
        assert_eq!(c.optional::<String>("eta").unwrap(), None);
    }

    #[test]
    fn errors() {
        let mut c = base();
        assert!(matches!(c.set("nope", "1"), Err(Error::Configuration(_))));
        assert!(c.merge_text("lr 0.1").is_err());
        c.set("k", "x").unwrap();
        assert!(c.get::<usize>("k").is_err());
        assert!(c.merge_overrides(["k"]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = base();
        c.set("lr", "0.5").unwrap();
        let mut d = base();
        d.merge_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }
}
