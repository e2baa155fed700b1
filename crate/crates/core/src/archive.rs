//! YFTA: a small named-tensor container for model weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "YFTA" | version: u32 | index_len: u64 | index: UTF-8 JSON | pad | payloads
//! ```
//!
//! The payload region starts at the first 64-byte boundary after the index.
//! Each entry's `offset` is relative to that boundary and is itself a multiple
//! of 64, so every payload is 64-byte aligned in the file. Payloads are raw
//! little-endian f32 values in row-major order; gaps are zero-filled.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"YFTA";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const HEADER_LEN: usize = 16;

/// Reserved metadata keys.
pub mod meta {
    pub const CONFIG_HASH: &str = "config_hash";
    pub const ANCHORS: &str = "anchors";
    pub const BN_EPS: &str = "bn_eps";
    pub const SCORE_MODE: &str = "score_mode";
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic bytes {0:?}, expected \"YFTA\"")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated: {0}")]
    Truncated(String),
    #[error("payloads of `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("malformed index: {0}")]
    Index(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}` declares {length} bytes but its shape needs {expected}")]
    LengthMismatch {
        name: String,
        length: u64,
        expected: u64,
    },
    #[error("tensor `{0}` payload is not 64-byte aligned")]
    Misaligned(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "archive tensor shape/data mismatch"
        );
        ArchiveTensor { shape, data }
    }

    fn byte_len(&self) -> usize {
        self.data.len() * 4
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, ArchiveTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    metadata: BTreeMap<String, String>,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Option<ArchiveTensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArchiveTensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArchiveTensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(IndexEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset: offset as u64,
                length: t.byte_len() as u64,
            });
            offset = align_up(offset + t.byte_len());
        }
        let index = Index {
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let index_bytes = serde_json::to_vec(&index).expect("index serialization cannot fail");
        let data_start = align_up(HEADER_LEN + index_bytes.len());

        let mut out = Vec::with_capacity(data_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(index_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&index_bytes);
        out.resize(data_start, 0);
        for (entry, t) in index.tensors.iter().zip(self.tensors.values()) {
            out.resize(data_start + entry.offset as usize, 0);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(ArchiveError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(ArchiveError::Truncated(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let index_end = (HEADER_LEN as u64)
            .checked_add(index_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| ArchiveError::Truncated(format!("index of {index_len} bytes")))?
            as usize;
        let index: Index = serde_json::from_slice(&bytes[HEADER_LEN..index_end])
            .map_err(|e| ArchiveError::Index(e.to_string()))?;
        let data_start = align_up(index_end);
        if data_start > bytes.len() {
            return Err(ArchiveError::Truncated(format!(
                "payload region starts at byte {data_start}, file has {}",
                bytes.len()
            )));
        }

        let mut extents: Vec<(u64, u64, &str)> = Vec::with_capacity(index.tensors.len());
        let mut tensors = BTreeMap::new();
        for e in &index.tensors {
            if e.dtype != "f32" {
                return Err(ArchiveError::Index(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    e.name, e.dtype
                )));
            }
            let expected = e
                .shape
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| ArchiveError::Index(format!("shape of `{}` overflows", e.name)))?;
            if expected != e.length {
                return Err(ArchiveError::LengthMismatch {
                    name: e.name.clone(),
                    length: e.length,
                    expected,
                });
            }
            if e.offset % ALIGN as u64 != 0 {
                return Err(ArchiveError::Misaligned(e.name.clone()));
            }
            if tensors.contains_key(&e.name) {
                return Err(ArchiveError::DuplicateName(e.name.clone()));
            }
            extents.push((e.offset, e.length, e.name.as_str()));
            tensors.insert(e.name.clone(), ());
        }
        extents.sort_by_key(|&(off, len, _)| (off, len));
        for pair in extents.windows(2) {
            let (a_off, a_len, a) = pair[0];
            let (b_off, b_len, b) = pair[1];
            if a_len > 0 && b_len > 0 && a_off + a_len > b_off {
                return Err(ArchiveError::Overlap(a.to_string(), b.to_string()));
            }
        }

        let mut archive = TensorArchive {
            metadata: index.metadata,
            tensors: BTreeMap::new(),
        };
        for e in index.tensors {
            let start = data_start as u64 + e.offset;
            let end = start + e.length;
            if end > bytes.len() as u64 {
                return Err(ArchiveError::Truncated(format!(
                    "payload of `{}` ends at byte {end}, file has {}",
                    e.name,
                    bytes.len()
                )));
            }
            let data = bytes[start as usize..end as usize]
                .chunks_exact(4)
                .map(|w| f32::from_le_bytes(w.try_into().unwrap()))
                .collect();
            archive
                .tensors
                .insert(e.name, ArchiveTensor { shape: e.shape, data });
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Name of the first tensor (in name order) whose shape or payload bits
    /// differ from `other`'s, or that exists in only one archive.
    pub fn first_difference(&self, other: &TensorArchive) -> Option<String> {
        let names: std::collections::BTreeSet<&String> =
            self.tensors.keys().chain(other.tensors.keys()).collect();
        names.into_iter().find_map(|name| {
            match (self.tensors.get(name), other.tensors.get(name)) {
                (Some(a), Some(b))
                    if a.shape == b.shape
                        && a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits())) =>
                {
                    None
                }
                _ => Some(name.clone()),
            }
        })
    }
}
