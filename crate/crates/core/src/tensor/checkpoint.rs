use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "m2fn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat map from dot-separated parameter path to shape and row-major values.
///
/// Stored as JSON; `f64` values print in shortest round-trip form and parse
/// back exactly, so a save/load cycle is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub tensors: IndexMap<String, CheckpointEntry>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta: None,
            tensors: IndexMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, path: impl Into<String>, t: &Tensor) {
        self.tensors.insert(
            path.into(),
            CheckpointEntry {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn tensor(&self, path: &str) -> Result<Tensor> {
        let e = self
            .tensors
            .get(path)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{path}`")))?;
        Ok(Tensor::new(e.shape.clone(), e.data.clone())?)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        for (path, e) in &ck.tensors {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Format(format!(
                    "`{path}`: shape {:?} does not match {} values",
                    e.shape,
                    e.data.len()
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
