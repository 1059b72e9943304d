//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 manifest length, JSON
//! manifest (names, shapes, dtype, free-form metadata), then each entry's
//! raw little-endian payload in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TTCKPT\x00\x01";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named parameter buffers plus free-form JSON metadata.
///
/// Entries keep insertion order, so the on-disk payload layout is stable.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint<S: Scalar> {
    entries: Vec<(String, Vec<usize>, Vec<S>)>,
    meta: serde_json::Value,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new() -> Self {
        Checkpoint {
            entries: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "checkpoint_insert",
                detail: format!("{}: shape {:?} vs {} values", name, shape, data.len()),
            });
        }
        if self.entries.iter().any(|(n, _, _)| n == name) {
            return Err(TensorError::Checkpoint(format!("duplicate entry {:?}", name)));
        }
        self.entries.push((name.to_string(), shape.to_vec(), data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[S])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.meta = meta;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            dtype: S::DTYPE.to_string(),
            entries: self
                .entries
                .iter()
                .map(|(name, shape, _)| ManifestEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| TensorError::Checkpoint(format!("manifest encode: {}", e)))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        let mut buf = Vec::new();
        for (_, _, data) in &self.entries {
            buf.clear();
            buf.reserve(data.len() * S::BYTE_WIDTH);
            for &v in data {
                v.write_le(&mut buf);
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic bytes".to_string()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported version {} (expected {})",
                version, VERSION
            )));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| TensorError::Checkpoint(format!("manifest decode: {}", e)))?;
        if manifest.dtype != S::DTYPE {
            return Err(TensorError::Checkpoint(format!(
                "dtype mismatch: file has {}, expected {}",
                manifest.dtype,
                S::DTYPE
            )));
        }
        let mut out = Checkpoint::new();
        out.meta = manifest.meta;
        for entry in manifest.entries {
            let numel: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; numel * S::BYTE_WIDTH];
            r.read_exact(&mut raw)?;
            let data: Vec<S> = raw
                .chunks_exact(S::BYTE_WIDTH)
                .map(|c| S::read_le(c))
                .collect();
            out.insert(&entry.name, &entry.shape, data)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TensorError::Checkpoint("trailing bytes".to_string()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::<f64>::new();
        ck.insert("w", &[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 4.25])
            .unwrap();
        ck.insert("b", &[3], vec![0.5, 0.25, -0.125]).unwrap();
        ck.set_meta(serde_json::json!({"stage": 1, "note": "test"}));
        ck.save(&path).unwrap();

        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        let (shape, data) = back.get("w").unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data, &[1.0, -2.5, 3.0, 0.0, 1e-300, 4.25]);
        assert_eq!(back.meta()["stage"], 1);
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            vec!["w", "b"],
            "order preserved"
        );
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::<f32>::new();
        ck.insert("w", &[1], vec![1.0]).unwrap();
        ck.save(&path).unwrap();
        let err = Checkpoint::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = Checkpoint::<f64>::new();
        ck.insert("w", &[1], vec![1.0]).unwrap();
        assert!(ck.insert("w", &[1], vec![2.0]).is_err());
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::<f64>::load(&path).is_err());
    }
}
