//! Run configuration: one JSON document, overridable key by key from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use compose_core::io::DataPaths;
use compose_core::model::ModelConfig;
use compose_core::synthdata::SynthConfig;
use compose_core::taxonomy::MissingCodePolicy;
use compose_core::text_encoder::FeatureHashConfig;
use compose_core::training::TrainConfig;

use crate::error::CliError;

/// Width of the patient memory in the desk preset.
pub const DESK_MEM_DIM: usize = 24;
/// Learning rate of the desk preset.
pub const DESK_LEARNING_RATE: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding the dataset files; `synth` writes here.
    pub data_dir: PathBuf,
    pub taxonomy_dir: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub enrollments: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Defaults to `model.bin` inside `output_dir`.
    pub model: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            taxonomy_dir: None,
            patients: None,
            trials: None,
            enrollments: None,
            labels: None,
            model: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PathsConfig {
    pub fn data_paths(&self) -> DataPaths {
        let mut p = DataPaths::in_dir(&self.data_dir);
        let pick = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        pick(&mut p.taxonomy_dir, &self.taxonomy_dir);
        pick(&mut p.patients, &self.patients);
        pick(&mut p.trials, &self.trials);
        pick(&mut p.enrollments, &self.enrollments);
        pick(&mut p.labels, &self.labels);
        p
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir.join("model.bin"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    FeatureHash(FeatureHashConfig),
    PrecomputedFile { path: PathBuf, embed_dim: usize },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::FeatureHash(FeatureHashConfig::default())
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderConfig::FeatureHash(c) => c.embed_dim,
            EncoderConfig::PrecomputedFile { embed_dim, .. } => *embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialisation, shuffling and the split.
    pub seed: u64,
    /// Single-threaded execution; also drops timings from outputs.
    pub deterministic: bool,
    /// Parse eligibility text strictly (fail on dropped items).
    pub strict_parsing: bool,
    pub missing_code_policy: MissingCodePolicy,
    pub paths: PathsConfig,
    pub encoder: EncoderConfig,
    /// `embed_dim` is always taken from the encoder.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            strict_parsing: false,
            missing_code_policy: MissingCodePolicy::Error,
            paths: PathsConfig::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig {
                mem_dim: DESK_MEM_DIM,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: DESK_LEARNING_RATE,
                ..TrainConfig::default()
            },
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        check_keys(&defaults, &value, "")?;
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `(dotted.path, value)` overrides and re-validates.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for (path, v) in overrides {
            set_path(&mut root, path, v.clone())?;
        }
        Self::from_value(root)
    }

    /// Propagates the shared seed and switches, then checks ranges.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.train.deterministic = self.deterministic;
        self.model.embed_dim = self.encoder.embed_dim();
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(self)
    }
}

/// Rejects keys the defaults do not know. Objects whose `kind` tag differs
/// from the default variant are not inspected.
fn check_keys(defaults: &Value, given: &Value, at: &str) -> Result<(), CliError> {
    let (Value::Object(d), Value::Object(g)) = (defaults, given) else {
        return Ok(());
    };
    if d.get("kind").is_some() && d.get("kind") != g.get("kind") {
        return Ok(());
    }
    for (k, v) in g {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match d.get(k) {
            Some(dv) => check_keys(dv, v, &path)?,
            None => return Err(CliError::Config(format!("unknown config key {path}"))),
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("config key {path} is not an object path")))?;
        if !obj.contains_key(*part) {
            return Err(CliError::Config(format!("unknown config key {path}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(CliError::Config("empty config key".into()))
}

/// Parses `key=value`; the value is read as JSON and falls back to a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected key=value, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
