//! JSON checkpoint container of named parameter tensors.
//!
//! ```json
//! {"schema": "langdet-checkpoint/1",
//!  "tensors": [{"name": "head.class.weight", "shape": [64, 4], "data": [...]}, ...]}
//! ```
//!
//! Tensors are written in name order; values use shortest round-trip float
//! formatting, so save/load is bit-exact and the file is deterministic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA: &str = "langdet-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    schema: String,
    tensors: Vec<Entry>,
}

pub fn to_json(store: &ParamStore) -> String {
    let c = Container {
        schema: CHECKPOINT_SCHEMA.to_string(),
        tensors: store
            .iter()
            .map(|(name, t)| Entry { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect(),
    };
    serde_json::to_string(&c).expect("finite parameters serialize")
}

pub fn from_json(text: &str) -> Result<ParamStore> {
    let c: Container =
        serde_json::from_str(text).map_err(|source| DetectorError::Json { path: "<checkpoint>".into(), source })?;
    if c.schema != CHECKPOINT_SCHEMA {
        return Err(DetectorError::Checkpoint(format!("unsupported schema {:?}", c.schema)));
    }
    let mut store = ParamStore::new();
    for e in c.tensors {
        if store.contains(&e.name) {
            return Err(DetectorError::Checkpoint(format!("duplicate tensor {:?}", e.name)));
        }
        let t = Tensor::new(e.shape, e.data)
            .map_err(|err| DetectorError::Checkpoint(format!("tensor {:?}: {err}", e.name)))?;
        store.insert(&e.name, t);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if store.iter().any(|(_, t)| !t.is_finite()) {
        return Err(DetectorError::Checkpoint("refusing to save non-finite parameters".into()));
    }
    fs::write(path, to_json(store)).map_err(|source| DetectorError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let text =
        fs::read_to_string(path).map_err(|source| DetectorError::Io { path: path.display().to_string(), source })?;
    from_json(&text).map_err(|e| match e {
        DetectorError::Json { source, .. } => DetectorError::Json { path: path.display().to_string(), source },
        other => other,
    })
}
