//! Checkpoints: `model.tect` holds every parameter back to back in the tensor
//! dump format, `model.json` names them and pins the config by hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::TecNetConfig;
use crate::model::net::TecNet;
use crate::params::ParamStore;
use crate::tensor::dump::{encoded_len, read_tensor, write_tensor};

pub const TENSOR_FILE: &str = "model.tect";
pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor record inside `model.tect`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: TecNetConfig,
    pub tensors: Vec<TensorEntry>,
    /// Scalars recorded at save time, such as the final validation Dice.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

pub fn tensor_path(dir: &Path) -> PathBuf {
    dir.join(TENSOR_FILE)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn save(
    dir: &Path,
    cfg: &TecNetConfig,
    store: &ParamStore,
    metrics: &BTreeMap<String, f64>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        write_tensor(&mut blob, &p.value)?;
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        tensors,
        metrics: metrics.clone(),
    };
    fs::write(tensor_path(dir), blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path(dir), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path(dir))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::Format(format!(
            "{}: line {} column {}: {e}",
            MANIFEST_FILE,
            e.line(),
            e.column()
        ))
    })?;
    if m.config.hash() != m.config_hash {
        return Err(Error::Format(format!(
            "{MANIFEST_FILE}: config_hash does not match its embedded config"
        )));
    }
    Ok(m)
}

/// Loads a checkpoint, rebuilding the network from the stored config. When
/// `expect` is given its hash must match the checkpoint's.
pub fn load(dir: &Path, expect: Option<&TecNetConfig>) -> Result<(TecNet, ParamStore, Manifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(cfg) = expect {
        let h = cfg.hash();
        if h != manifest.config_hash {
            return Err(Error::Config(format!(
                "config hash {h} does not match checkpoint hash {}",
                manifest.config_hash
            )));
        }
    }
    let (net, mut store) = TecNet::build(&manifest.config, 0)?;
    let blob = fs::read(tensor_path(dir))?;
    if manifest.tensors.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, network has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for e in &manifest.tensors {
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {}", e.name)))?;
        let end = e.offset + encoded_len(&e.shape);
        if end > blob.len() {
            return Err(Error::Format(format!(
                "tensor {} runs past end of {TENSOR_FILE}",
                e.name
            )));
        }
        let t = read_tensor(&mut Cursor::new(&blob[e.offset..end]))?;
        let slot = &mut store.get_mut(id).value;
        if t.shape() != e.shape.as_slice() || t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {}: stored {:?}, manifest {:?}, network {:?}",
                e.name,
                t.shape(),
                e.shape,
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok((net, store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = TecNetConfig::nano();
        let (_, mut store) = TecNet::build(&cfg, 3).unwrap();
        store.round_to_f32();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("val_dice".to_string(), 0.5);
        save(a.path(), &cfg, &store, &metrics).unwrap();
        let (_, loaded, m) = load(a.path(), Some(&cfg)).unwrap();
        for (x, y) in store.iter().zip(loaded.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data());
        }
        save(b.path(), &m.config, &loaded, &m.metrics).unwrap();
        for f in [TENSOR_FILE, MANIFEST_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn hash_guard() {
        let cfg = TecNetConfig::nano();
        let (_, store) = TecNet::build(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &cfg, &store, &BTreeMap::new()).unwrap();
        let mut other = cfg.clone();
        other.toggles.use_acam = false;
        let err = load(dir.path(), Some(&other)).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let cfg = TecNetConfig::nano();
        let (_, store) = TecNet::build(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &cfg, &store, &BTreeMap::new()).unwrap();
        let p = tensor_path(dir.path());
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        assert!(load(dir.path(), None).is_err());
    }
}
