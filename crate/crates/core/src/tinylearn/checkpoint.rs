//! JSON checkpoints: a config header, named parameter tensors and optional
//! optimizer state. Floats are written with round-trip precision so a reload
//! is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdamState, ParamStore, Tensor2D};

pub const CHECKPOINT_FORMAT: &str = "symdistill-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, params: &ParamStore, adam: Option<&AdamState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            params: params
                .ids()
                .map(|id| NamedTensor {
                    name: params.name(id).to_string(),
                    tensor: params.get(id).clone(),
                })
                .collect(),
            adam: adam.cloned(),
        }
    }

    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), p.tensor.clone());
        }
        store
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unexpected format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ck.version));
        }
        for p in &ck.params {
            if p.tensor.data.len() != p.tensor.rows * p.tensor.cols {
                return Err(CheckpointError::Format(format!("tensor {} has wrong length", p.name)));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylearn::{AdamConfig, Rng};

    #[test]
    fn round_trip_is_exact() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        for (name, r, c) in [("a", 3, 4), ("b", 1, 4)] {
            let data = (0..r * c).map(|_| rng.normal() * 1e-3).collect();
            store.add(name, Tensor2D::from_vec(r, c, data).unwrap());
        }
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.t = 7;
        adam.m[0].data[3] = 1.0 / 3.0;
        let ck = Checkpoint::new(serde_json::json!({"variant": "label_only"}), &store, Some(&adam));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.param_store(), store);
    }

    #[test]
    fn rejects_other_versions() {
        let store = ParamStore::new();
        let mut ck = Checkpoint::new(serde_json::Value::Null, &store, None);
        ck.version = 9;
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json()),
            Err(CheckpointError::Version(9))
        ));
    }
}
