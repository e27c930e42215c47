//! JSON checkpoint container shared by every trained model.
//!
//! A checkpoint is one JSON object:
//! `{"format": "scialign-ckpt/1", "kind", "config", "step", "config_hash", "params"}`
//! where `params` maps parameter names to `{rows, cols, data}` row-major
//! matrices. Floats are written in shortest round-trip form and parsed
//! exactly, so a reload reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{NamedParams, ParamSet};

pub const FORMAT: &str = "scialign-ckpt/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("malformed checkpoint {0}: {1}")]
    Json(String, #[source] serde_json::Error),
    #[error("unsupported checkpoint format `{0}`")]
    Format(String),
    #[error("expected a `{expected}` checkpoint, found `{found}`")]
    Kind { expected: String, found: String },
    #[error("config hash mismatch: stored {stored}, recomputed {computed}")]
    Hash { stored: String, computed: String },
    #[error("parameter mismatch: {0}")]
    Params(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub config_hash: String,
    pub params: NamedParams,
}

/// SHA-256 of the canonical (key-sorted) JSON rendering of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    let text = serde_json::to_string(&value).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, step: u64, params: &ParamSet) -> Self {
        Self {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            step,
            config_hash: config_hash(config),
            params: params.to_named(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(self).map_err(|e| CheckpointError::Json(path.display().to_string(), e))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CheckpointError::Io(dir.display().to_string(), e))?;
        }
        fs::write(path, text).map_err(|e| CheckpointError::Io(path.display().to_string(), e))
    }

    /// Loads and validates format, kind and config hash.
    pub fn load(path: &Path, expected_kind: &str) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CheckpointError::Json(path.display().to_string(), e))?;
        if ck.format != FORMAT {
            return Err(CheckpointError::Format(ck.format));
        }
        if ck.kind != expected_kind {
            return Err(CheckpointError::Kind {
                expected: expected_kind.to_string(),
                found: ck.kind,
            });
        }
        let computed = config_hash(&ck.config);
        if computed != ck.config_hash {
            return Err(CheckpointError::Hash {
                stored: ck.config_hash,
                computed,
            });
        }
        Ok(ck)
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C, CheckpointError> {
        serde_json::from_value(self.config.clone()).map_err(|e| CheckpointError::Json("config".into(), e))
    }

    pub fn restore_into(&self, params: &mut ParamSet) -> Result<(), CheckpointError> {
        params.load_named(&self.params).map_err(CheckpointError::Params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamSet::new();
        let vals = vec![0.1 + 0.2, std::f64::consts::PI, -1e-300, 123456.789e10, f64::MIN_POSITIVE];
        params.add("w", Matrix::from_vec(1, 5, vals.clone()), true);
        let ck = Checkpoint::new("demo", &serde_json::json!({"a": 1}), 7, &params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, "demo").unwrap();
        assert_eq!(back, ck);
        let bits: Vec<u64> = back.params["w"].data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(Checkpoint::load(&path, "other"), Err(CheckpointError::Kind { .. })));
    }
}
