use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Plain `key=value` configuration file: one pair per line, `#` comments.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| Error::data(idx + 1, format!("expected key=value, got '{t}'")))?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::data_msg(format!("config key '{key}': bad value '{v}'"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Stable digest of the whole config (reported in the run manifest).
    pub fn digest(&self) -> u64 {
        // FNV-1a over the canonical key=value listing
        let mut hash: u64 = 0xcbf29ce484222325;
        for (k, v) in &self.entries {
            for b in k.bytes().chain("=".bytes()).chain(v.bytes()).chain("\n".bytes()) {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let cfg = KvConfig::parse("# run\nseed = 42\nitems=200\n\n").unwrap();
        assert_eq!(cfg.get("seed"), Some("42"));
        assert_eq!(cfg.get_or::<usize>("items", 0).unwrap(), 200);
        assert_eq!(cfg.get_or::<usize>("missing", 7).unwrap(), 7);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = KvConfig::parse("seed=1\nbroken line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn digest_stable_and_order_independent() {
        let a = KvConfig::parse("a=1\nb=2\n").unwrap();
        let b = KvConfig::parse("b=2\na=1\n").unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
