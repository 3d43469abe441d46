//! Checkpoint directories: `manifest.json` (names, shapes, frozen flags,
//! payload digest, free-form metadata) next to `params.bin`, the
//! little-endian parameter payload in name order.

use std::path::Path;

use candle_core::DType;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_atomic, write_json};
use crate::nn::{ParamInfo, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Codec,
    Stage1,
    Stage2,
    Classifier,
    Recognizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub dtype: String,
    pub params: Vec<ParamInfo>,
    pub payload_sha256: String,
    pub seed: u64,
    pub metadata: serde_json::Value,
}

impl CheckpointManifest {
    pub fn frozen_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.frozen).map(|p| p.name.as_str()).collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.name.as_str()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.numel).sum()
    }

    pub fn metadata_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.metadata.clone())?)
    }
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

/// Write `store` into `dir` (created if needed). Both files are replaced
/// atomically.
pub fn save<M: Serialize>(
    dir: &Path,
    kind: CheckpointKind,
    store: &ParamStore,
    seed: u64,
    metadata: &M,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload = store.to_payload()?;
    let manifest = CheckpointManifest {
        kind,
        dtype: dtype_name(store.dtype())?.to_string(),
        params: store.infos(),
        payload_sha256: sha256_hex(&payload),
        seed,
        metadata: serde_json::to_value(metadata)?,
    };
    write_atomic(&dir.join(PAYLOAD_FILE), &payload)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("no checkpoint at {}", dir.display())));
    }
    read_json(&path)
}

/// Load a checkpoint, verifying the payload digest.
pub fn load(dir: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let manifest = load_manifest(dir)?;
    let path = dir.join(PAYLOAD_FILE);
    let payload = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = sha256_hex(&payload);
    if digest != manifest.payload_sha256 {
        return Err(Error::Config(format!(
            "payload digest mismatch in {}: manifest {}, file {digest}",
            dir.display(),
            manifest.payload_sha256
        )));
    }
    let store = ParamStore::from_payload(&manifest.params, &payload, parse_dtype(&manifest.dtype)?)?;
    Ok((manifest, store))
}

/// Load and check the checkpoint kind.
pub fn load_kind(dir: &Path, kind: CheckpointKind) -> Result<(CheckpointManifest, ParamStore)> {
    let (m, s) = load(dir)?;
    if m.kind != kind {
        return Err(Error::Config(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            dir.display(),
            m.kind
        )));
    }
    Ok((m, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(DType::F32);
        s.get("b.w", &[3, 2], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        s.get("a.bias", &[4], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        s.set_frozen("a.bias", true).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let m1 = save(&dir.path().join("one"), CheckpointKind::Stage1, &s, 7, &serde_json::json!({"x": 1})).unwrap();
        let (m2, s2) = load(&dir.path().join("one")).unwrap();
        assert_eq!(m1, m2);
        assert!(s2.is_frozen("a.bias"));
        save(&dir.path().join("two"), CheckpointKind::Stage1, &s2, 7, &m2.metadata).unwrap();
        let p1 = std::fs::read(dir.path().join("one").join(PAYLOAD_FILE)).unwrap();
        let p2 = std::fs::read(dir.path().join("two").join(PAYLOAD_FILE)).unwrap();
        assert_eq!(p1, p2);
        let j1 = std::fs::read(dir.path().join("one").join(MANIFEST_FILE)).unwrap();
        let j2 = std::fs::read(dir.path().join("two").join(MANIFEST_FILE)).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn corrupted_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), CheckpointKind::Codec, &store(), 0, &()).unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn missing_and_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::MissingArtifact(_))));
        save(dir.path(), CheckpointKind::Stage1, &store(), 0, &()).unwrap();
        assert!(load_kind(dir.path(), CheckpointKind::Stage2).is_err());
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.frozen_names(), vec!["a.bias"]);
        assert_eq!(m.trainable_count(), 6);
    }
}
