//! Single-file model checkpoints: named parameter arrays plus a config echo,
//! a model-kind tag, and the hash of the tabular schema the model was trained
//! against. Encoders and the fusion module share this container so stage
//! ordering can be enforced by inspecting `kind`, and loading validates that
//! the stored tensors match the shapes the config implies.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::params::{ParamError, ParamRecord, ParamStore};

const MODEL_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("checkpoint holds a `{got}` model, expected `{expected}`")]
    KindMismatch { expected: String, got: String },
    #[error("checkpoint parameters do not match the config: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Serialize, Deserialize)]
struct ModelCheckpointFile {
    format_version: u32,
    kind: String,
    schema_hash: String,
    config: serde_json::Value,
    params: IndexMap<String, ParamRecord>,
}

/// A model's weights bundled with everything needed to reconstruct and
/// sanity-check it: the model kind, its config (JSON echo), and the schema
/// hash of the dataset it was fitted on.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub schema_hash: String,
    pub config: serde_json::Value,
    pub store: ParamStore,
}

impl ModelCheckpoint {
    pub fn new(
        kind: &str,
        config: &impl Serialize,
        schema_hash: &str,
        store: ParamStore,
    ) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        Self { kind: kind.to_string(), schema_hash: schema_hash.to_string(), config, store }
    }

    /// Deserializes the config echo into the caller's config type.
    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T, CheckpointError> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| CheckpointError::Parse(format!("config echo: {e}")))
    }

    /// Errors unless this checkpoint carries a `kind` model.
    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind.to_string(),
                got: self.kind.clone(),
            });
        }
        Ok(())
    }

    /// Validates that the stored tensors carry exactly the names and shapes
    /// of `expected` (e.g. a freshly registered store for the same config).
    pub fn validate_shapes(&self, expected: &ParamStore) -> Result<(), CheckpointError> {
        for (name, want) in expected.iter() {
            let got = self
                .store
                .get(name)
                .map_err(|_| CheckpointError::ParamMismatch(format!("missing parameter `{name}`")))?;
            if got.value.shape() != want.value.shape() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    got.value.shape(),
                    want.value.shape()
                )));
            }
        }
        for (name, _) in self.store.iter() {
            if expected.get(name).is_err() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "unexpected parameter `{name}`"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = ModelCheckpointFile {
            format_version: MODEL_CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            schema_hash: self.schema_hash.clone(),
            config: self.config.clone(),
            params: self.store.to_records(),
        };
        let json = serde_json::to_string(&file).expect("checkpoint serializes");
        fs::write(path, json)
            .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let json = fs::read_to_string(path)
            .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        let file: ModelCheckpointFile =
            serde_json::from_str(&json).map_err(|e| CheckpointError::Parse(e.to_string()))?;
        if file.format_version != MODEL_CHECKPOINT_VERSION {
            return Err(CheckpointError::Parse(format!(
                "unsupported checkpoint version {}",
                file.format_version
            )));
        }
        Ok(Self {
            kind: file.kind,
            schema_hash: file.schema_hash,
            config: file.config,
            store: ParamStore::from_records(file.params)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::normal_init;
    use crate::util::derive_rng;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct ToyConfig {
        width: usize,
        depth: usize,
    }

    fn toy_store(width: usize) -> ParamStore {
        let mut rng = derive_rng(3, "checkpoint-test");
        let mut store = ParamStore::new();
        store.add("toy.w", normal_init(&mut rng, &[width, 2], 1.0)).unwrap();
        store.add("toy.b", normal_init(&mut rng, &[2], 1.0)).unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_kind_config_hash_and_values() {
        let cfg = ToyConfig { width: 3, depth: 1 };
        let ckpt = ModelCheckpoint::new("toy", &cfg, "hash-abc", toy_store(3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt.json");
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back.kind, "toy");
        assert_eq!(back.schema_hash, "hash-abc");
        assert_eq!(back.config_as::<ToyConfig>().unwrap(), cfg);
        for (name, param) in ckpt.store.iter() {
            let loaded = back.store.get(name).unwrap();
            assert_eq!(loaded.value, param.value, "values survive bit-exactly for `{name}`");
        }
    }

    #[test]
    fn kind_and_shape_validation_reject_mismatches() {
        let cfg = ToyConfig { width: 3, depth: 1 };
        let ckpt = ModelCheckpoint::new("toy", &cfg, "h", toy_store(3));
        assert!(ckpt.expect_kind("toy").is_ok());
        assert!(matches!(
            ckpt.expect_kind("other"),
            Err(CheckpointError::KindMismatch { .. })
        ));
        // Same names, different shape.
        let wrong = toy_store(4);
        assert!(matches!(
            ckpt.validate_shapes(&wrong),
            Err(CheckpointError::ParamMismatch(_))
        ));
        // A stored parameter the config does not imply is rejected too.
        let full = toy_store(3);
        let only_w = full.subset_prefix("toy.w");
        assert!(ckpt.validate_shapes(&only_w).is_err());
        assert!(ckpt.validate_shapes(&full).is_ok());
    }
}
