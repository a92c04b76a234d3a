//! Flat JSON config files and the flags > file > defaults resolution.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Every key any subcommand reads from a config file.
const KNOWN_KEYS: &[&str] = &[
    "adversary",
    "alpha",
    "batch_size",
    "checkpoint_every",
    "corpus_seed",
    "count",
    "dataset",
    "detector_per_class",
    "detector_seed",
    "epochs",
    "eval_per_class",
    "format",
    "iterations_per_epoch",
    "kind",
    "lr",
    "perceptual_seed",
    "seed",
    "size",
    "train_per_class",
    "variant",
];

/// Values from a config file plus a record of everything resolved so far.
#[derive(Debug, Default)]
pub struct Resolver {
    file: Map<String, Value>,
    resolved: BTreeMap<String, Value>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Resolver::default()) };
        let text =
            std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| Failure::usage(format!("config {}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let Value::Object(file) = serde_json::from_str(text).map_err(|e| e.to_string())? else {
            return Err("expected a flat JSON object".into());
        };
        if let Some((k, _)) = file.iter().find(|(k, _)| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(format!("unknown key {k:?}"));
        }
        if let Some((k, _)) = file.iter().find(|(_, v)| v.is_object() || v.is_array()) {
            return Err(format!("key {k:?} must hold a scalar"));
        }
        Ok(Resolver { file, resolved: BTreeMap::new() })
    }

    /// Flag if given, else the config file entry, else `default`.
    pub fn pick<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, Failure> {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(raw)) => {
                serde_json::from_value(raw.clone()).map_err(|e| Failure::usage(format!("config key {key:?}: {e}")))?
            }
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), serde_json::to_value(&value).expect("scalar serializes"));
        Ok(value)
    }

    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        self.resolved.clone()
    }
}
