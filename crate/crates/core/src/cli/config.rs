//! Run configuration: one canonical JSON document, optionally patched by
//! `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::CorpusConfig;
use crate::encoder::ChunkSpec;
use crate::error::{Error, Result};
use crate::model::{canonical_json, ChunkPolicy, LossWeights, ModelConfig, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the JSONL splits and manifest.
    pub corpus_dir: PathBuf,
    /// Generation settings used by `gen-data`.
    pub generate: CorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus_dir: PathBuf::from("corpus"),
            generate: CorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk: ChunkPolicy,
    /// Keep a checkpoint after every `checkpoint_every` epochs (0: only final and best).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            chunk: ChunkPolicy::Dynamic,
            checkpoint_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub chunk_size: i64,
    pub num_left_chunks: i64,
    pub weights: LossWeights,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 10,
            chunk_size: -1,
            num_left_chunks: -1,
            weights: LossWeights::DECODE,
        }
    }
}

impl DecodeConfig {
    pub fn spec(&self) -> Result<ChunkSpec> {
        ChunkSpec::new(self.chunk_size, self.num_left_chunks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            weights: LossWeights::TRAIN,
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            data: DataConfig::default(),
            seed: 1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.train.chunk.validate()?;
        self.decode.weights.validate()?;
        self.decode.spec()?;
        self.data.generate.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be positive".into()));
        }
        Ok(())
    }

    /// Reads `path` (or the defaults) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        // Validate the file alone first so unknown keys are reported against it.
        let parsed: RunConfig = serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if !overrides.is_empty() {
            value = serde_json::to_value(&parsed)?;
            for o in overrides {
                apply_override(&mut value, o)?;
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(canonical_json(self)?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }
}

/// Sets `key.path=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not an object", keys[..i].join("."))))?;
        node = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
    }
    if node.is_object() {
        return Err(Error::Config(format!("{path:?} is a section, not a scalar")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = RunConfig::load(None, &["model.h=1".into(), "train.chunk.mode=dynamic".into(), "seed=7".into()]).unwrap();
        assert_eq!(cfg.model.h, 1);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::load(None, &["model.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["model=1".into()]), Err(Error::Config(_))));
        let bad: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"extra": 1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::load(None, &["weights.lambda=2".into()]).is_err());
        assert!(RunConfig::load(None, &["decode.chunk_size=0".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
