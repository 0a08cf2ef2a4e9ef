//! Layered `key=value` settings: config file first, explicit flags on top.

use std::collections::BTreeMap;
use std::path::Path;

use specdet::config::parse_key_values;
use specdet::{Error, Result};

#[derive(Debug, Default)]
pub struct Settings {
    pending: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let pending = match config {
            Some(p) => parse_key_values(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            pending,
            used: BTreeMap::new(),
        })
    }

    /// Overrides a key when the flag was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.pending.insert(key.to_string(), v.to_string());
        }
    }

    /// Sets a key only when a switch is present.
    pub fn switch(&mut self, key: &str, on: bool, value: &str) {
        if on {
            self.pending.insert(key.to_string(), value.to_string());
        }
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        let v = self.pending.remove(key)?;
        self.used.insert(key.to_string(), v.clone());
        Some(v)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key}={v}: {e}")))
            })
            .transpose()
    }

    pub fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required setting {key:?} (flag --{})", key.replace('_', "-"))))
    }

    /// Drains the keys in `keys`, in order, from the pending set.
    pub fn take_all(&mut self, keys: &[&str]) -> Vec<(String, String)> {
        keys.iter()
            .filter_map(|k| self.take(k).map(|v| (k.to_string(), v)))
            .collect()
    }

    /// Errors on any setting nobody consumed.
    pub fn finish(&self) -> Result<()> {
        match self.pending.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown setting {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn used(&self) -> &BTreeMap<String, String> {
        &self.used
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "lr=0.1\nepochs=3\n").unwrap();
        let mut s = Settings::load(Some(&p)).unwrap();
        s.flag("lr", Some(0.5));
        s.flag::<f64>("epochs", None);
        assert_eq!(s.take("lr").as_deref(), Some("0.5"));
        assert_eq!(s.take_parsed::<usize>("epochs").unwrap(), Some(3));
        assert!(s.finish().is_ok());
        s.flag("bogus", Some(1));
        assert!(s.finish().is_err());
    }
}
