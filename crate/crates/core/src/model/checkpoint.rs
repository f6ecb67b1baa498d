//! JSON checkpoints: architecture spec, flat weight array, and fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::convnet::{ConvNet, ConvNetSpec};
use crate::error::{Result, SadaError};
use crate::grid::{read_json, write_json};

const FORMAT: &str = "sada-convnet-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    fingerprint: String,
    spec: ConvNetSpec,
    params: Vec<f64>,
}

pub fn save_checkpoint(model: &ConvNet, path: &Path) -> Result<()> {
    write_json(
        path,
        &CheckpointFile {
            format: FORMAT.into(),
            fingerprint: model.fingerprint(),
            spec: model.spec().clone(),
            params: model.params().to_vec(),
        },
    )
}

/// Loads a checkpoint and verifies that its weights hash to the recorded
/// fingerprint.
pub fn load_checkpoint(path: &Path) -> Result<ConvNet> {
    if !path.exists() {
        return Err(SadaError::Config(format!(
            "checkpoint {} not found; train a model first (`sada train`)",
            path.display()
        )));
    }
    let file: CheckpointFile = read_json(path)?;
    if file.format != FORMAT {
        return Err(SadaError::InvalidInput(format!(
            "{}: unknown checkpoint format {:?}",
            path.display(),
            file.format
        )));
    }
    let model = ConvNet::from_params(file.spec, file.params)?;
    if model.fingerprint() != file.fingerprint {
        return Err(SadaError::InvalidInput(format!(
            "{}: weights do not match recorded fingerprint {}",
            path.display(),
            file.fingerprint
        )));
    }
    Ok(model)
}

/// Directory of checkpoints named by fingerprint.
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| SadaError::io(&root, e))?;
        Ok(CheckpointStore { root })
    }

    pub fn path_for(&self, fingerprint: &str) -> PathBuf {
        self.root.join(format!("{fingerprint}.json"))
    }

    /// Stores the model and returns its fingerprint.
    pub fn put(&self, model: &ConvNet) -> Result<String> {
        let fp = model.fingerprint();
        let path = self.path_for(&fp);
        if !path.exists() {
            save_checkpoint(model, &path)?;
        }
        Ok(fp)
    }

    pub fn get(&self, fingerprint: &str) -> Result<ConvNet> {
        load_checkpoint(&self.path_for(fingerprint))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlockSpec;
    use crate::spectral::Shape;

    fn spec() -> ConvNetSpec {
        ConvNetSpec {
            input: Shape::new(1, 8, 8),
            conv: vec![ConvBlockSpec { channels: 2, kernel: 3, stride: 1, pool: 2 }],
            hidden: 4,
            classes: 3,
            init_seed: 9,
        }
    }

    #[test]
    fn store_round_trip_by_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        let model = ConvNet::new(spec()).unwrap();
        let fp = store.put(&model).unwrap();
        let back = store.get(&fp).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.spec(), model.spec());
    }

    #[test]
    fn tampered_weights_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&ConvNet::new(spec()).unwrap(), &path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["params"][0] = serde_json::json!(123.0);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let err = load_checkpoint(Path::new("/nonexistent/model.json")).unwrap_err();
        assert!(err.is_config());
    }
}
