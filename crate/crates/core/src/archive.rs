//! Directory format for named tensor sets.
//!
//! ```text
//! <dir>/manifest.json   format tag, kind, config, tensor table
//! <dir>/tensors.bin     concatenated little-endian f64 arrays, manifest order
//! ```
//!
//! Loading fails closed: any disagreement between the manifest and the
//! payload is a format error naming the tensor, and nothing is returned.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT_TAG: &str = "longnote-tensors";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
    /// Number of f64 elements.
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub endianness: String,
    pub dtype: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Archive {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn write(dir: &Path, kind: &str, config: serde_json::Value, tensors: &IndexMap<String, Tensor>) -> Result<()> {
    if let Some((name, _)) = tensors.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Format(format!("tensor {name} has non-finite values")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    let total: usize = tensors.values().map(Tensor::len).sum();
    let mut payload = Vec::with_capacity(total * 8);
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            len: t.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        endianness: "little".into(),
        dtype: "f64".into(),
        config,
        tensors: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(mpath, e))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, payload).map_err(|e| Error::io(tpath, e))
}

pub fn read(dir: &Path) -> Result<Archive> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: corrupt manifest: {e}", mpath.display())))?;
    if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported archive format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.endianness != "little" || manifest.dtype != "f64" {
        return Err(Error::Format(format!(
            "unsupported encoding {}/{}",
            manifest.endianness, manifest.dtype
        )));
    }
    let tpath = dir.join(TENSORS_FILE);
    let payload = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;

    let mut tensors = IndexMap::with_capacity(manifest.tensors.len());
    let mut cursor = 0u64;
    for entry in &manifest.tensors {
        let name = &entry.name;
        let expected: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || expected as u64 != entry.len {
            return Err(Error::Format(format!(
                "tensor {name}: shape {:?} disagrees with length {}",
                entry.shape, entry.len
            )));
        }
        if entry.offset != cursor {
            return Err(Error::Format(format!(
                "tensor {name}: offset {} where {cursor} was expected",
                entry.offset
            )));
        }
        let end = cursor + entry.len * 8;
        if end > payload.len() as u64 {
            return Err(Error::Format(format!(
                "tensor {name}: data file truncated ({} bytes, need {end})",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[cursor as usize..end as usize]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor {name} has non-finite values")));
        }
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("tensor {name} listed twice")));
        }
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::Format(format!(
            "data file has {} bytes, manifest accounts for {cursor}",
            payload.len()
        )));
    }
    Ok(Archive {
        kind: manifest.kind,
        config: manifest.config,
        tensors,
    })
}

/// Checks a loaded tensor set against the exact expected names and shapes.
pub fn check_layout(tensors: &IndexMap<String, Tensor>, expected: &[(String, Vec<usize>)]) -> Result<()> {
    if tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "archive has {} tensors, configuration expects {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (name, shape) in expected {
        match tensors.get(name) {
            None => return Err(Error::Format(format!("tensor {name} missing"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, configuration expects {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}
