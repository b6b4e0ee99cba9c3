//! Named-tensor container.
//!
//! Layout: the magic `RFTF1`, a `u64` little-endian manifest length, the
//! JSON manifest, then one contiguous little-endian blob. Manifest entries
//! carry `name`, `dtype`, `shape`, `offset` and `length`; offsets are
//! relative to the blob start, sorted, and tile the blob exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"RFTF1";
pub const FORMAT_VERSION: u32 = 1;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDType {
    F32,
    F64,
    U8,
}

impl StoredDType {
    fn size(self) -> usize {
        match self {
            StoredDType::F32 => 4,
            StoredDType::F64 => 8,
            StoredDType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    /// Opaque bytes, e.g. a serialized packed tensor.
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl StoredTensor {
    pub fn dtype(&self) -> StoredDType {
        match self {
            StoredTensor::F32(_) => StoredDType::F32,
            StoredTensor::F64(_) => StoredDType::F64,
            StoredTensor::U8 { .. } => StoredDType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::U8 { shape, .. } => shape,
        }
    }

    pub fn bytes(&self) -> Vec<u8> {
        match self {
            StoredTensor::F32(t) => f32::to_le_bytes_vec(t.data()),
            StoredTensor::F64(t) => f64::to_le_bytes_vec(t.data()),
            StoredTensor::U8 { data, .. } => data.clone(),
        }
    }

    /// Float contents converted to `T`; `None` for byte tensors.
    pub fn to_float<T: Scalar>(&self) -> Option<Tensor<T>> {
        match self {
            StoredTensor::F32(t) => Some(t.cast()),
            StoredTensor::F64(t) => Some(t.cast()),
            StoredTensor::U8 { .. } => None,
        }
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::F32(t)
    }
}

impl From<Tensor<f64>> for StoredTensor {
    fn from(t: Tensor<f64>) -> Self {
        StoredTensor::F64(t)
    }
}

/// Tensors by name plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: StoredDType,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<StoredTensor>) {
        self.tensors.insert(name.into(), t.into());
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = t.bytes();
            entries.push(Entry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                length: bytes.len(),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HDR: &str = "<manifest>";
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(format_err(HDR, "missing RFTF1 magic"));
        }
        let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let mbytes = bytes
            .get(13..13usize.saturating_add(mlen))
            .ok_or_else(|| format_err(HDR, format!("manifest of {mlen} bytes is truncated")))?;
        let manifest: Manifest =
            serde_json::from_slice(mbytes).map_err(|e| format_err(HDR, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(format_err(
                HDR,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let blob = &bytes[13 + mlen..];

        let mut tensors = BTreeMap::new();
        let mut cursor = 0usize;
        for e in &manifest.tensors {
            let err = |msg: String| format_err(e.name.clone(), msg);
            if e.offset != cursor {
                return Err(err(format!(
                    "offset {} overlaps or leaves a gap (expected {cursor})",
                    e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            if numel * e.dtype.size() != e.length {
                return Err(err(format!(
                    "length {} does not match shape {:?} of {:?}",
                    e.length, e.shape, e.dtype
                )));
            }
            let end = e.offset + e.length;
            let raw = blob.get(e.offset..end).ok_or_else(|| {
                err(format!("blob truncated: needs bytes {}..{end}, have {}", e.offset, blob.len()))
            })?;
            let t = match e.dtype {
                StoredDType::F32 => StoredTensor::F32(Tensor::new(
                    e.shape.clone(),
                    raw.chunks_exact(4).map(f32::from_le_chunk).collect(),
                )?),
                StoredDType::F64 => StoredTensor::F64(Tensor::new(
                    e.shape.clone(),
                    raw.chunks_exact(8).map(f64::from_le_chunk).collect(),
                )?),
                StoredDType::U8 => StoredTensor::U8 {
                    shape: e.shape.clone(),
                    data: raw.to_vec(),
                },
            };
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(err("duplicate tensor name".into()));
            }
            cursor = end;
        }
        if cursor != blob.len() {
            return Err(format_err(
                HDR,
                format!("{} trailing blob bytes not covered by any tensor", blob.len() - cursor),
            ));
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }
}

pub fn save_tensors(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new();
        f.insert("a", Tensor::<f32>::from_f64([2, 2], &[1., -2., 3.5, 0.]).unwrap());
        f.insert("b", Tensor::<f64>::from_f64([3], &[0.1, 0.2, 0.3]).unwrap());
        f.insert(
            "c.packed",
            StoredTensor::U8 {
                shape: vec![3],
                data: vec![1, 2, 255],
            },
        );
        f.metadata.insert("k".into(), "v".into());
        f
    }

    fn with_manifest(json: &str, blob: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(blob);
        out
    }

    #[test]
    fn round_trip_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"RFTF1");
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let err = TensorFile::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        match err {
            Error::Format { tensor, .. } => assert_eq!(tensor, "c.packed"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let json = r#"{"format_version":1,"tensors":[
            {"name":"x","dtype":"u8","shape":[4],"offset":0,"length":4},
            {"name":"y","dtype":"u8","shape":[4],"offset":2,"length":4}]}"#;
        let err = TensorFile::from_bytes(&with_manifest(json, &[0; 8])).unwrap_err();
        assert!(matches!(err, Error::Format { ref tensor, .. } if tensor == "y"), "{err}");
    }

    #[test]
    fn unknown_fields_ignored() {
        let json = r#"{"format_version":1,"future":{"x":1},"tensors":[
            {"name":"x","dtype":"u8","shape":[2],"offset":0,"length":2,"checksum":"abc"}]}"#;
        let f = TensorFile::from_bytes(&with_manifest(json, &[7, 9])).unwrap();
        assert_eq!(
            f.get("x"),
            Some(&StoredTensor::U8 {
                shape: vec![2],
                data: vec![7, 9]
            })
        );
    }

    #[test]
    fn corrupt_manifest_and_magic() {
        assert!(TensorFile::from_bytes(b"NOPE").is_err());
        let err = TensorFile::from_bytes(&with_manifest("{not json", &[])).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rftf");
        save_tensors(&path, &sample()).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), sample());
    }
}
