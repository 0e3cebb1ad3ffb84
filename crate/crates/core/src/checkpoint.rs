//! Versioned JSON container for named parameter tensors plus the model
//! configuration and seed that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "gaitlu-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `recognizer` or `lugan`.
    pub kind: String,
    pub seed: u64,
    pub digest: String,
    pub config: serde_json::Value,
    /// Kind-specific metadata, e.g. the rig a generator was trained on.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, config: &impl Serialize, store: &ParamStore, extra: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            seed,
            digest: store.digest(),
            config: serde_json::to_value(config).expect("config serializes"),
            extra,
            tensors: store
                .iter()
                .map(|(name, t)| NamedTensor { name: name.into(), shape: t.shape.clone(), data: t.data.clone() })
                .collect(),
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Contract(format!("tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape)));
            }
            store.add(t.name.clone(), Tensor::new(&t.shape, t.data.clone()));
        }
        Ok(store)
    }

    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks format, version, kind and digest.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Format { path: path.into(), line: 0, message };
        if ck.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})", ck.version)));
        }
        if ck.kind != kind {
            return Err(bad(format!("expected a {kind} checkpoint, found {}", ck.kind)));
        }
        let digest = ck.store()?.digest();
        if digest != ck.digest {
            return Err(bad("tensor digest mismatch".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[2], vec![0.1 + 0.2, -1e-300]));
        store.add("b", Tensor::new(&[1, 1], vec![std::f64::consts::PI]));
        let ck = Checkpoint::new("recognizer", 7, &serde_json::json!({"x": 1}), &store, serde_json::Value::Null);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, "recognizer").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.store().unwrap().digest(), store.digest());
        assert!(matches!(Checkpoint::load(&path, "lugan"), Err(Error::Format { .. })));
    }

    #[test]
    fn tampered_tensor_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[1], vec![1.0]));
        let mut ck = Checkpoint::new("lugan", 1, &0, &store, serde_json::Value::Null);
        ck.tensors[0].data[0] = 2.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path, "lugan"), Err(Error::Format { .. })));
    }
}
