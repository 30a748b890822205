//! On-disk checkpoints: one tensor container per parameter plus a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::objective::ObjectiveConfig;
use super::segmenter::{Segmenter, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numerics::io;

pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ParamEntry>,
    pub iter: usize,
    pub config_hash: String,
}

/// SHA-256 of the JSON encoding of `cfg`.
pub fn config_hash(cfg: &ObjectiveConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serializes")))
}

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &Segmenter, iter: usize, cfg: &ObjectiveConfig) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(PARAM_NAMES.len());
    for (name, t) in params.tensors() {
        let file = format!("{name}.catn");
        io::save(dir.join(&file), t)?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        params: entries,
        iter,
        config_hash: config_hash(cfg),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Segmenter, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut named = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let path = dir.join(&entry.file);
        let t = io::load(&path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path,
                message: format!("expected shape {:?}, got {:?}", entry.shape, t.shape()),
            });
        }
        named.push((entry.name.clone(), t));
    }
    Ok((Segmenter::from_tensors(named)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seg = Segmenter::init(3, 4, 5, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = ObjectiveConfig::default();
        save_checkpoint(dir.path(), &seg, 17, &cfg).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, seg);
        assert_eq!(manifest.iter, 17);
        assert_eq!(manifest.config_hash, config_hash(&cfg));
        assert_eq!(manifest.params[0].name, "extractor.w1");
    }
}
