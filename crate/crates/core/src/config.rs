//! Flat `key = value` configuration files with layered overrides.
//!
//! Keys are dotted paths into a typed configuration struct
//! (`assoc.epochs = 30`). Layers are merged in increasing precedence:
//! struct defaults, file, environment (`FOODSPACE_ASSOC__EPOCHS=30`), flags.
//! Values are typed by the default they override, so `out_dir = 123` stays a
//! string while `seed = 123` becomes a number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "FOODSPACE_";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: n + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: n + 1,
                    message: "empty key".into(),
                });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Collects `FOODSPACE_*` variables; `__` separates path components.
    pub fn from_env() -> Self {
        Self::from_vars(std::env::vars())
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, String)>) -> Self {
        let entries = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                if rest.is_empty() {
                    return None;
                }
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        Self { entries }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Applies every entry to `T::default()` and deserializes the result.
    /// Unknown keys are rejected.
    pub fn resolve<T>(&self) -> Result<T>
    where
        T: Serialize + DeserializeOwned + Default,
    {
        self.resolve_onto(&T::default())
    }

    pub fn resolve_onto<T>(&self, base: &T) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
    {
        let mut root = serde_json::to_value(base)?;
        for (key, raw) in &self.entries {
            apply(&mut root, key, raw)?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("key {key:?} does not name a config section")));
        };
        let Some(child) = map.get_mut(*part) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        if i + 1 == parts.len() {
            *child = typed_value(child, raw);
            return Ok(());
        }
        node = child;
    }
    unreachable!("split always yields at least one part")
}

fn typed_value(default: &Value, raw: &str) -> Value {
    match default {
        Value::String(_) | Value::Null if !looks_structured(raw) => {
            if let Ok(Value::String(s)) = serde_json::from_str::<Value>(raw) {
                Value::String(s)
            } else if matches!(default, Value::Null) {
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
            } else {
                Value::String(raw.to_string())
            }
        }
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

fn looks_structured(raw: &str) -> bool {
    raw.starts_with('[') || raw.starts_with('{')
}

/// Flattens a serializable value into sorted `key = value` lines.
pub fn to_text<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value)?;
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    let mut out = String::new();
    for (k, v) in lines {
        let _ = writeln!(out, "{k} = {v}");
    }
    Ok(out)
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Short stable hash of the canonical flattened form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = to_text(value)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(hex::encode(&digest[..8]))
}

/// Resolves a typed config from defaults, an optional file, the process
/// environment and explicit overrides, in that order of precedence.
pub fn layered<T>(file: Option<&Path>, overrides: &KvConfig) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    layered_with_env(file, &KvConfig::from_env(), overrides)
}

pub fn layered_with_env<T>(file: Option<&Path>, env: &KvConfig, overrides: &KvConfig) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut merged = match file {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    // Environment variables that do not name a key of this config are
    // ignored; they may belong to another command.
    let defaults = serde_json::to_value(T::default())?;
    for (k, v) in &env.entries {
        if lookup(&defaults, k).is_some() {
            merged.set(k.clone(), v.clone());
        }
    }
    merged.merge(overrides);
    merged.resolve()
}

fn lookup<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |node, part| match node {
        Value::Object(map) => map.get(part),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        epochs: usize,
        lr: f64,
    }
    impl Default for Inner {
        fn default() -> Self {
            Self { epochs: 3, lr: 0.1 }
        }
    }

    #[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
    #[serde(default)]
    struct Outer {
        seed: u64,
        out_dir: String,
        manifest: Option<String>,
        flag: bool,
        inner: Inner,
    }

    #[test]
    fn parses_and_resolves_typed_values() {
        let kv = KvConfig::parse(
            "# comment\nseed = 7\nout_dir = 123\ninner.epochs = 9\nflag = true\n",
            "t",
        )
        .unwrap();
        let cfg: Outer = kv.resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, "123");
        assert_eq!(cfg.inner.epochs, 9);
        assert!(cfg.flag);
        assert_eq!(cfg.inner.lr, 0.1);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let kv = KvConfig::parse("inner.epoch = 9", "t").unwrap();
        let err = kv.resolve::<Outer>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn malformed_line_reports_position() {
        let err = KvConfig::parse("seed = 1\nnonsense\n", "f.kv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn precedence_flag_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.kv");
        std::fs::write(&file, "seed = 1\ninner.epochs = 5\nout_dir = file\n").unwrap();
        let env = KvConfig::from_vars([
            ("FOODSPACE_SEED".to_string(), "2".to_string()),
            ("FOODSPACE_OUT_DIR".to_string(), "env".to_string()),
            ("FOODSPACE_UNRELATED".to_string(), "x".to_string()),
            ("OTHER".to_string(), "y".to_string()),
        ]);
        let mut flags = KvConfig::new();
        flags.set("seed", "3");
        let cfg: Outer = layered_with_env(Some(&file), &env, &flags).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.out_dir, "env");
        assert_eq!(cfg.inner.epochs, 5);
    }

    #[test]
    fn text_round_trip_and_hash_stability() {
        let cfg = Outer {
            seed: 11,
            out_dir: "runs/a".into(),
            manifest: Some("m.jsonl".into()),
            flag: true,
            inner: Inner { epochs: 4, lr: 0.25 },
        };
        let text = to_text(&cfg).unwrap();
        let back: Outer = KvConfig::parse(&text, "t").unwrap().resolve().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&cfg).unwrap(), config_hash(&back).unwrap());
        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(config_hash(&cfg).unwrap(), config_hash(&other).unwrap());
    }
}
