//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by
//! command-line flags. Every resolved value remembers where it came from.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lightsleep::nn::ModelConfig;
use lightsleep::train::TrainConfig;
use lightsleep::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Where each top-level setting was resolved from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub config_file: Option<String>,
    pub model_file: Option<String>,
    pub sources: BTreeMap<String, Source>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Keys of a JSON object, or none when the value is not an object.
fn keys(v: &serde_json::Value) -> Vec<String> {
    v.as_object()
        .map(|o| o.keys().cloned().collect())
        .unwrap_or_default()
}

impl Resolved {
    /// Loads `config_file` (a full run config) and then `model_file` (a
    /// model config alone, replacing the file's model section).
    pub fn load(config_file: Option<&Path>, model_file: Option<&Path>) -> Result<Self> {
        let mut sources = BTreeMap::new();
        let mut config = RunConfig::default();
        for f in train_fields() {
            sources.insert(format!("train.{f}"), Source::Default);
        }
        sources.insert("model".into(), Source::Default);
        if let Some(path) = config_file {
            let raw: serde_json::Value = read_json(path)?;
            config = serde_json::from_value(raw.clone())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if raw.get("model").is_some() {
                sources.insert("model".into(), Source::File);
            }
            if let Some(train) = raw.get("train") {
                for k in keys(train) {
                    sources.insert(format!("train.{k}"), Source::File);
                }
            }
        }
        if let Some(path) = model_file {
            config.model = read_json(path)?;
            sources.insert("model".into(), Source::File);
        }
        config.model.validate()?;
        Ok(Self {
            config,
            config_file: config_file.map(|p| p.display().to_string()),
            model_file: model_file.map(|p| p.display().to_string()),
            sources,
        })
    }

    /// Applies a flag value to a train field when the flag was given.
    pub fn flag<V>(&mut self, field: &str, value: Option<V>, set: impl FnOnce(&mut TrainConfig, V)) {
        if let Some(v) = value {
            set(&mut self.config.train, v);
            self.sources.insert(format!("train.{field}"), Source::Flag);
        }
    }
}

fn train_fields() -> Vec<String> {
    keys(&serde_json::to_value(TrainConfig::default()).expect("train config serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"train": {"epochs": 7, "seed": 3}}"#).unwrap();
        let mut r = Resolved::load(Some(&cfg), None).unwrap();
        r.flag("seed", Some(9u64), |t, v| t.seed = v);
        assert_eq!(r.config.train.epochs, 7);
        assert_eq!(r.config.train.seed, 9);
        assert_eq!(r.config.train.batch_size, 40);
        assert_eq!(r.sources["train.epochs"], Source::File);
        assert_eq!(r.sources["train.seed"], Source::Flag);
        assert_eq!(r.sources["train.batch_size"], Source::Default);
        assert_eq!(r.sources["model"], Source::Default);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
        assert!(matches!(Resolved::load(Some(&cfg), None), Err(Error::Config(_))));
    }
}
