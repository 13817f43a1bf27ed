//! Checkpoint serialization: a JSON map of named parameters plus a manifest.
//!
//! Values are stored as 32-bit floats; the in-memory engine is 64-bit, so a
//! save/load round trip quantizes parameters to f32.

use super::Tensor;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Model configuration and any run metadata, stored verbatim.
    pub manifest: serde_json::Value,
    /// Parameter name -> shape + row-major f32 values.
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn new(manifest: serde_json::Value) -> Self {
        Checkpoint {
            manifest,
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) {
        self.params.insert(
            name.to_string(),
            ParamEntry {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            },
        );
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .params
            .get(name)
            .ok_or_else(|| CoreError::format(format!("checkpoint missing parameter '{}'", name)))?;
        Tensor::from_vec(&e.shape, e.data.iter().map(|&v| v as f64).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| CoreError::format(format!("checkpoint encode: {}", e)))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::format(format!("checkpoint decode: {}", e)))
    }
}
