//! Resolved run settings. Values come from built-in defaults, then an
//! optional JSON config file, then command-line flags, each layer overriding
//! the one before. Credentials are never part of this struct; see
//! [`crate::remote::API_KEY_ENV`].

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sitqa_core::annotation::StudyConfig;
use sitqa_core::pge::GenerationConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub scene: Option<PathBuf>,
    /// API root of an OpenAI-compatible chat service.
    pub chat_endpoint: Option<String>,
    /// Transcript served instead of a live chat service.
    pub chat_replay: Option<PathBuf>,
    /// Save every live chat response as a replayable transcript.
    pub record_transcript: bool,
    pub embedding_endpoint: Option<String>,
    pub embedding_model: String,
    /// Cached vectors served instead of a live embedding service.
    pub embedding_replay: Option<PathBuf>,
    pub embedding_dim: usize,
    /// Transcript for the query classifier (contextual / situational /
    /// temporal judgements).
    pub classifier_replay: Option<PathBuf>,
    /// Use the chat provider for classification.
    pub classify_with_chat: bool,
    pub generation: GenerationConfig,
    pub study: StudyConfig,
    pub retries: u32,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            scene: None,
            chat_endpoint: None,
            chat_replay: None,
            record_transcript: false,
            embedding_endpoint: None,
            embedding_model: "text-embedding-3-small".to_string(),
            embedding_replay: None,
            embedding_dim: 256,
            classifier_replay: None,
            classify_with_chat: false,
            generation: GenerationConfig::default(),
            study: StudyConfig::default(),
            retries: 3,
        }
    }
}

/// Recursively merges `patch` into `base`; objects merge key by key, any
/// other value replaces.
pub fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flag values collected by the subcommands, keyed by settings path.
#[derive(Debug, Default)]
pub struct FlagLayer(Map<String, Value>);

impl FlagLayer {
    pub fn set<T: Serialize>(&mut self, path: &str, value: Option<T>) -> &mut Self {
        let Some(v) = value else {
            return self;
        };
        let v = serde_json::to_value(v).expect("flag value serializes");
        let mut parts: Vec<&str> = path.split('.').collect();
        let last = parts.pop().expect("non-empty path");
        let mut cur = &mut self.0;
        for p in parts {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("intermediate path is an object");
        }
        cur.insert(last.to_string(), v);
        self
    }

    pub fn flag(&mut self, path: &str, on: bool) -> &mut Self {
        self.set(path, on.then_some(true))
    }
}

pub fn resolve(config_file: Option<&Path>, flags: FlagLayer) -> anyhow::Result<Settings> {
    let mut merged = serde_json::to_value(Settings::default())?;
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(UsageError(format!(
                "config file {} must hold a JSON object",
                path.display()
            ))
            .into());
        }
        overlay(&mut merged, file);
    }
    overlay(&mut merged, Value::Object(flags.0));
    let settings: Settings =
        serde_json::from_value(merged).map_err(|e| UsageError(format!("invalid settings: {e}")))?;
    settings
        .generation
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    settings
        .study
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    Ok(settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(
            &cfg,
            r#"{"generation": {"n": 4, "tau": 0.8}, "embedding_dim": 64}"#,
        )
        .unwrap();
        let mut flags = FlagLayer::default();
        flags
            .set("generation.n", Some(7))
            .set::<f64>("generation.x", None);
        let s = resolve(Some(&cfg), flags).unwrap();
        assert_eq!(s.generation.n, 7);
        assert_eq!(s.generation.tau, 0.8);
        assert_eq!(s.generation.x, 30.0);
        assert_eq!(s.embedding_dim, 64);
    }

    #[test]
    fn credentials_in_config_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"api_key": "sk-123"}"#).unwrap();
        let err = resolve(Some(&cfg), FlagLayer::default()).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let mut flags = FlagLayer::default();
        flags.set("study.annotators_per_task", Some(4));
        assert!(resolve(None, flags)
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
    }
}
