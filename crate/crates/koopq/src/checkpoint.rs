//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON document carrying the model configuration and
//! every parameter by name, shape, and values. Loading rebuilds the
//! architecture from the stored configuration (which fixes the parameter
//! naming and layout), then overwrites each freshly initialized tensor
//! with its stored values; any name or shape disagreement is an error
//! rather than a silent partial restore.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::{ModelConfig, MultistageModel};
use crate::numcore::ParamStore;

/// Format version written by this crate.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    version: u32,
    config: ModelConfig,
    params: Vec<StoredParam>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes the model's parameters to `path`.
pub fn save(path: impl AsRef<Path>, config: &ModelConfig, store: &ParamStore) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let params = store
        .ids()
        .map(|id| StoredParam {
            name: store.name(id).to_string(),
            shape: store.shape(id).to_vec(),
            values: store.values(id).to_vec(),
        })
        .collect();
    let doc = StoredCheckpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params,
    };
    let json = serde_json::to_string(&doc)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

/// Restores a model from `path` into a fresh parameter store.
///
/// Returns the rebuilt model together with the store holding its restored
/// parameters.
pub fn load(path: impl AsRef<Path>) -> Result<(MultistageModel, ParamStore), CheckpointError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: StoredCheckpoint = serde_json::from_str(&text)?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(doc.version));
    }
    let mut store = ParamStore::new();
    let model = MultistageModel::new(&mut store, &doc.config, 0)?;
    if doc.params.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "stores {} parameters but the architecture has {}",
            doc.params.len(),
            store.len()
        )));
    }
    for stored in &doc.params {
        let id = store.find(&stored.name).ok_or_else(|| {
            CheckpointError::Mismatch(format!("parameter '{}' does not exist in the architecture", stored.name))
        })?;
        if store.shape(id) != &stored.shape[..] {
            return Err(CheckpointError::Mismatch(format!(
                "parameter '{}' has shape {:?} but the checkpoint stores {:?}",
                stored.name,
                store.shape(id),
                stored.shape
            )));
        }
        if stored.values.len() != store.numel(id) {
            return Err(CheckpointError::Mismatch(format!(
                "parameter '{}' stores {} values for {} slots",
                stored.name,
                stored.values.len(),
                store.numel(id)
            )));
        }
        store.values_mut(id).copy_from_slice(&stored.values);
    }
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StageDims, Variant};

    fn small_config() -> ModelConfig {
        ModelConfig::new(
            Variant::Sdk,
            vec![StageDims { p: 3, q: 2 }, StageDims { p: 2, q: 2 }],
            4,
        )
    }

    #[test]
    fn round_trip_preserves_every_value_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = small_config();
        let mut store = ParamStore::new();
        let _ = MultistageModel::new(&mut store, &cfg, 1234).unwrap();
        save(&path, &cfg, &store).unwrap();
        let (model2, store2) = load(&path).unwrap();
        assert_eq!(model2.config.variant, cfg.variant);
        assert_eq!(store.len(), store2.len());
        for id in store.ids() {
            let id2 = store2.find(store.name(id)).unwrap();
            assert_eq!(store.values(id), store2.values(id2), "{}", store.name(id));
            assert_eq!(store.shape(id), store2.shape(id2));
        }
    }

    #[test]
    fn rejects_future_format_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = small_config();
        let mut store = ParamStore::new();
        let _ = MultistageModel::new(&mut store, &cfg, 0).unwrap();
        save(&path, &cfg, &store).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        match load(&path) {
            Err(CheckpointError::Version(99)) => {}
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_shape_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = small_config();
        let mut store = ParamStore::new();
        let _ = MultistageModel::new(&mut store, &cfg, 0).unwrap();
        save(&path, &cfg, &store).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc["params"][0]["shape"] = serde_json::json!([1, 1]);
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn rejects_missing_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = small_config();
        let mut store = ParamStore::new();
        let _ = MultistageModel::new(&mut store, &cfg, 0).unwrap();
        save(&path, &cfg, &store).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let arr = doc["params"].as_array_mut().unwrap();
        arr.pop();
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn missing_file_reports_the_path() {
        let err = load("/nonexistent/nowhere/model.json").unwrap_err();
        match err {
            CheckpointError::Io { path, .. } => assert!(path.contains("nowhere")),
            other => panic!("expected an io error, got {other:?}"),
        }
    }
}
