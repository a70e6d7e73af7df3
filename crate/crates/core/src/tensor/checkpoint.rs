//! Versioned JSON checkpoint: named tensors plus a free-form metadata echo.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            role: None,
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(
            name.into(),
            TensorRecord {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| TensorError::Missing(name.to_string()))?;
        Tensor::new(rec.shape.clone(), rec.data.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TensorError::Version {
                found: ck.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            }
            .into());
        }
        for rec in ck.tensors.values() {
            Tensor::new(rec.shape.clone(), rec.data.clone())?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_roundtrip_is_exact(data in prop::collection::vec(-1e300f64..1e300, 1..40)) {
            let t = Tensor::new(vec![data.len()], data).unwrap();
            let mut ck = Checkpoint::default();
            ck.insert("w", &t);
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.get("w").unwrap()), bits(&t));
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut ck = Checkpoint::default();
        ck.format_version = 99;
        let err = Checkpoint::from_json(&ck.to_json()).unwrap_err();
        assert!(matches!(
            err,
            CheckpointError::Tensor(TensorError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn inconsistent_shape_rejected() {
        let text = r#"{"format_version":1,"tensors":{"w":{"shape":[2,2],"data":[1.0]}}}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
