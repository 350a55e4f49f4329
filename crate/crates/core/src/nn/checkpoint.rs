//! Versioned JSON checkpoints of named parameter arrays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sadh-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Free-form run description (model configuration, training summary).
    pub meta: serde_json::Value,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new<'a>(meta: serde_json::Value, params: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta,
            params: params
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Copy stored values into `targets`, which must match by name, order and shape.
    pub fn restore<'a>(&self, targets: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        let targets: Vec<_> = targets.into_iter().collect();
        if targets.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} arrays, model expects {}",
                self.params.len(),
                targets.len()
            )));
        }
        for ((name, t), stored) in targets.into_iter().zip(&self.params) {
            if name != stored.name || t.shape() != stored.shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint array {} {:?} does not match model parameter {} {:?}",
                    stored.name,
                    stored.shape,
                    name,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&stored.values);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        for a in &ck.params {
            if a.shape.iter().product::<usize>() != a.values.len() {
                return Err(Error::format(path, format!("array {} has inconsistent shape", a.name)));
            }
        }
        Ok(ck)
    }
}
