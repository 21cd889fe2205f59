//! Named-tensor container used for model weights, editor state, and resumable
//! training snapshots.
//!
//! Layout: the magic bytes `EDLB`, a little-endian u32 format version, a
//! little-endian u64 metadata length, that many bytes of UTF-8 JSON, then the
//! tensor payloads as little-endian f64 in the order the JSON manifest lists
//! them. Tensors are written sorted by name so identical contents always
//! produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"EDLB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    BadVersion(u32),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

/// Writes metadata and tensors to `path` atomically (temp file + rename).
pub fn save(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &IndexMap<String, Tensor>,
) -> Result<()> {
    let mut names: Vec<&String> = tensors.keys().collect();
    names.sort();
    let header = Header {
        meta: meta.clone(),
        tensors: names
            .iter()
            .map(|n| TensorEntry {
                name: (*n).clone(),
                shape: tensors[*n].shape(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for name in &names {
            for v in tensors[*name].data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back as (metadata, tensors in file order).
pub fn load(path: &Path) -> Result<(serde_json::Value, IndexMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let meta_len = u64::from_le_bytes(buf8) as usize;
    let mut json = vec![0u8; meta_len];
    r.read_exact(&mut json)
        .map_err(|_| CheckpointError::Corrupt("metadata truncated".into()))?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut tensors = IndexMap::new();
    for entry in header.tensors {
        let n = entry.shape[0] * entry.shape[1];
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| {
            CheckpointError::Corrupt(format!("payload truncated at tensor {:?}", entry.name))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors
            .insert(
                entry.name.clone(),
                Tensor::from_vec(entry.shape[0], entry.shape[1], data),
            )
            .is_some()
        {
            return Err(CheckpointError::Corrupt(format!(
                "duplicate tensor {:?}",
                entry.name
            )));
        }
    }
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((header.meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> (serde_json::Value, IndexMap<String, Tensor>) {
        let meta = json!({"kind": "unit-test", "step": 17});
        let mut tensors = IndexMap::new();
        tensors.insert("b.weight".to_string(), Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 6.0]));
        tensors.insert("a.bias".to_string(), Tensor::row(vec![0.5, -0.125]));
        (meta, tensors)
    }

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.edlb");
        let (meta, tensors) = sample();
        save(&path, &meta, &tensors).unwrap();
        let (meta2, tensors2) = load(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors2.len(), 2);
        for (name, t) in &tensors {
            assert!(tensors2[name].bits_eq(t), "tensor {name} changed");
        }
        // Sorted on disk regardless of insertion order.
        let names: Vec<&String> = tensors2.keys().collect();
        assert_eq!(names, ["a.bias", "b.weight"]);
    }

    #[test]
    fn identical_contents_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, tensors) = sample();
        let p1 = dir.path().join("one.edlb");
        let p2 = dir.path().join("two.edlb");
        save(&p1, &meta, &tensors).unwrap();
        let mut reordered = IndexMap::new();
        for key in ["a.bias", "b.weight"] {
            reordered.insert(key.to_string(), tensors[key].clone());
        }
        save(&p2, &meta, &reordered).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.edlb");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.edlb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadVersion(99))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.edlb");
        let (meta, tensors) = sample();
        save(&path, &meta, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));
    }
}
