//! Flat `key = value` text used for every config file and for the config
//! block stored inside checkpoints.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", lineno + 1))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(config_err!("line {}: empty key", lineno + 1));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(config_err!("line {}: duplicate key {key:?}", lineno + 1));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Remove `key` and parse it into `slot`; leaves `slot` alone if absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|e| config_err!("{key} = {raw:?}: {e}"))?;
        }
        Ok(())
    }

    /// Comma-separated list variant of [`take`](Self::take).
    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = parse_list(&raw).map_err(|e| config_err!("{key}: {e}"))?;
        }
        Ok(())
    }

    /// Error out on keys nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => {
                let keys: Vec<_> = self.entries.into_keys().collect();
                Err(config_err!("unknown keys: {}", keys.join(", ")))
            }
        }
    }

    /// Remove every key that starts with `prefix` and return those entries
    /// with the prefix stripped.
    pub fn split_prefix(&mut self, prefix: &str) -> KvMap {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = KvMap::new();
        for k in keys {
            let v = self.entries.remove(&k).expect("key just listed");
            out.entries.insert(k[prefix.len()..].to_string(), v);
        }
        out
    }

    /// Insert every entry of `other` with `prefix` prepended.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| config_err!("{s:?}: {e}")))
        .collect()
}

pub fn join_list<T: Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Types that round-trip through a [`KvMap`].
pub trait KvConfig: Sized + Default {
    fn write_kv(&self, kv: &mut KvMap);

    /// Override fields present in `kv`, consuming them.
    fn read_kv(&mut self, kv: &mut KvMap) -> Result<()>;

    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.write_kv(&mut kv);
        kv
    }

    fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.read_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(KvMap::parse(text)?)
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(KvMap::load(path)?)
    }

    fn to_text(&self) -> String {
        self.to_kv().to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_take() {
        let mut kv = KvMap::parse("# comment\n a = 3\nb=0.5\n\nlist = 1, 2,3\n").unwrap();
        let (mut a, mut b, mut list) = (0usize, 0.0f64, Vec::<u32>::new());
        kv.take("a", &mut a).unwrap();
        kv.take("b", &mut b).unwrap();
        kv.take_list("list", &mut list).unwrap();
        kv.finish().unwrap();
        assert_eq!((a, b, list), (3, 0.5, vec![1, 2, 3]));
    }

    #[test]
    fn malformed_input_is_config_error() {
        for text in ["novalue", "= 3", "a = 1\na = 2"] {
            assert!(matches!(KvMap::parse(text), Err(crate::Error::Config(_))), "{text}");
        }
        let mut kv = KvMap::parse("a = x").unwrap();
        let mut a = 0usize;
        assert!(matches!(kv.take("a", &mut a), Err(crate::Error::Config(_))));
        assert!(matches!(KvMap::parse("zzz = 1").unwrap().finish(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn prefixes_split_and_merge() {
        let mut kv = KvMap::parse("model.hidden = 8\nlr = 0.1\nmodel.heads = 2").unwrap();
        let model = kv.split_prefix("model.");
        assert_eq!(model.get("hidden"), Some("8"));
        assert_eq!(kv.to_text(), "lr = 0.1\n");
        kv.merge_prefixed("model.", &model);
        assert_eq!(kv.get("model.heads"), Some("2"));
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KvMap::new();
        kv.set("x", 1.25);
        kv.set("name", "abc");
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
    }
}
