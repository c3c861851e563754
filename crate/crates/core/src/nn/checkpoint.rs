//! Checkpoint container: a safetensors file whose header metadata carries a
//! single `cuedgen` entry, a JSON object with `schema_version`, `kind` and
//! the model configuration.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;
const META_KEY: &str = "cuedgen";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_tensors(mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) -> Self {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
        self
    }

    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Writes the file and returns its sha256.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let header = serde_json::json!({
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "kind": self.kind,
            "meta": self.meta,
        });
        let info = HashMap::from([(META_KEY.to_string(), header.to_string())]);
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
            .collect::<Result<_>>()?;
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(contiguous.iter().map(|(k, v)| (k.as_str(), v)), Some(info), &tmp)
            .map_err(|e| Error::format(tmp.display().to_string(), e.to_string()))?;
        std::fs::rename(&tmp, path)?;
        file_sha256(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let loc = path.display().to_string();
        let (_, st_meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        let raw = st_meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(loc.clone(), "not a cuedgen checkpoint"))?;
        let header: Value = serde_json::from_str(raw)?;
        let version = header["schema_version"].as_u64().unwrap_or(0);
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::format(loc, format!("unsupported schema_version {version}")));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self {
            kind: header["kind"].as_str().unwrap_or_default().to_string(),
            meta: header["meta"].clone(),
            tensors,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format(
                "checkpoint",
                format!("expected a `{kind}` checkpoint, found `{}`", self.kind),
            ));
        }
        Ok(self)
    }
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("test", serde_json::json!({"d": 4, "eta": 0.07}));
        ck.tensors.insert("a.w".into(), Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap());
        ck.tensors.insert("b".into(), Tensor::zeros(5, DType::F32, &Device::Cpu).unwrap());
        let h1 = ck.save(dir.path().join("one.st")).unwrap();
        let h2 = ck.save(dir.path().join("two.st")).unwrap();
        assert_eq!(h1, h2);
        let back = Checkpoint::load(dir.path().join("one.st")).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["d"], 4);
        assert_eq!(back.tensors["a.w"].dims(), &[2, 3]);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = Checkpoint::load("/nonexistent/ck.st").unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
