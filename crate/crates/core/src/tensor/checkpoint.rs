//! Single-file tensor manifest.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of UTF-8
//! JSON, then every entry's data as little-endian `f64`s, concatenated in
//! manifest order. The header records each entry's name, shape and byte
//! offset into the data section, plus a free-form `metadata` object.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT: &str = "metascale-tensors";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    metadata: serde_json::Value,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value, entries: Vec<CheckpointEntry>) -> Self {
        Checkpoint { metadata, entries }
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` shape {:?} does not match {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            let len = (e.data.len() * 8) as u64;
            entries.push(HeaderEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT.into(),
            version: VERSION,
            metadata: self.metadata.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("truncated file".into());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().unwrap();
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes.get(8..8 + header_len).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let data = &bytes[8 + header_len..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let start = e.offset as usize;
            let raw = data
                .get(start..start + e.len as usize)
                .ok_or_else(truncated)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if e.shape.iter().product::<usize>() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` has inconsistent length",
                    e.name
                )));
            }
            entries.push(CheckpointEntry {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            entries,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let bytes = self.to_bytes()?;
        w.write_all(&bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
