//! Checkpoints: one MMT1 file per parameter plus `index.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mmt;
use crate::model::{MMSTConfig, MMSTModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub config_hash: String,
    pub config: MMSTConfig,
    pub params: Vec<ParamEntry>,
}

/// Saves every parameter whose name starts with one of `prefixes`
/// (all parameters when `prefixes` is empty).
pub fn save(model: &MMSTModel, dir: &Path, prefixes: &[&str]) -> Result<CheckpointIndex> {
    let mut params = Vec::new();
    for (i, (name, value)) in model.params.iter().enumerate() {
        if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let file = format!("params/{i:04}.mmt");
        let bytes = mmt::write(&dir.join(&file), value)?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let index = CheckpointIndex {
        config_hash: model.config.hash(),
        config: model.config.clone(),
        params,
    };
    mmt::write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Copies every checkpoint parameter that `model` also has (by name) into
/// it. Returns the names loaded. Shapes must agree.
pub fn load_into(model: &mut MMSTModel, dir: &Path) -> Result<Vec<String>> {
    let index = read_index(dir)?;
    let mut loaded = Vec::new();
    for entry in &index.params {
        let Some(id) = model.params.id(&entry.name) else {
            continue;
        };
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checksum(path));
        }
        let tensor = mmt::decode(&bytes, &path)?;
        model.params.set(id, tensor).map_err(|_| Error::Format {
            path: path.clone(),
            msg: format!("shape of `{}` does not match the model", entry.name),
        })?;
        loaded.push(entry.name.clone());
    }
    Ok(loaded)
}

/// Rebuilds the model described by the index and loads all its parameters.
pub fn load(dir: &Path) -> Result<MMSTModel> {
    let index = read_index(dir)?;
    let mut model = MMSTModel::new(&index.config, 0)?;
    let loaded = load_into(&mut model, dir)?;
    if loaded.len() != model.params.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: format!("checkpoint holds {} of {} parameters", loaded.len(), model.params.len()),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PRETRAIN_PREFIXES;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_within_f32() {
        let cfg = MMSTConfig::nano64();
        let model = MMSTModel::new(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = save(&model, dir.path(), &[]).unwrap();
        assert_eq!(index.params.len(), model.params.len());
        assert_eq!(index.config_hash, cfg.hash());
        let back = load(dir.path()).unwrap();
        assert_eq!(back.params.names(), model.params.names());
        for (a, b) in back.params.values().iter().zip(model.params.values()) {
            assert!(a.max_abs_diff(b) <= 1e-7 * b.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
        }
    }

    #[test]
    fn subset_save_and_partial_load() {
        let cfg = MMSTConfig::nano64();
        let mut model = MMSTModel::new(&cfg, 4).unwrap();
        let id = model.params.id("mm.cls").unwrap();
        model.params.set(id, Tensor::full(vec![64], 0.25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = save(&model, dir.path(), &PRETRAIN_PREFIXES).unwrap();
        assert!(index.params.iter().all(|p| p.name.starts_with("backbone.") || p.name.starts_with("mm.")));
        assert!(load(dir.path()).is_err());
        let mut fresh = MMSTModel::new(&cfg, 9).unwrap();
        let loaded = load_into(&mut fresh, dir.path()).unwrap();
        assert_eq!(loaded.len(), index.params.len());
        assert_eq!(fresh.params.by_name("mm.cls").unwrap().data(), &[0.25; 64]);
    }

    #[test]
    fn tampered_file_is_rejected() {
        let model = MMSTModel::new(&MMSTConfig::nano64(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = save(&model, dir.path(), &[]).unwrap();
        let path = dir.path().join(&index.params[0].file);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checksum(_))));
    }
}
