//! Embedding stores and their binary file format.
//!
//! ```text
//! "GSEB"  u16 version  u32 dim  u32 count
//! count × [ u16 id_len | id (UTF-8) | dim × f32 ]
//! u32 CRC-32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSEB";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Fixed-dimension vectors keyed by utterance id, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: impl Into<String>, values: &[f32]) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::Data(format!(
                "embedding `{id}` has {} values, store dim is {}",
                values.len(),
                self.dim
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("embedding `{id}` has a non-finite value at {bad}")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Data(format!("duplicate utterance id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.vector(i))
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.vector(i)))
    }
}

pub fn encode(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_LEN + store.len() * (2 + 16 + 4 * store.dim) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (id, v) in store.iter() {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Data(format!("utterance id longer than 65535 bytes: `{id}`")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let err = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER_LEN + 4 {
        return Err(err("file too short for an embedding header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(err("bad magic, not an embedding file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(err(format!("unsupported embedding file version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    // Records may not run into the trailing checksum.
    let end = bytes.len() - 4;
    let mut pos = HEADER_LEN;
    let mut store = EmbeddingStore::new(dim);
    let mut vals = vec![0f32; dim];
    for rec in 0..count {
        if end - pos < 2 {
            return Err(err(format!("record {rec}: truncated before id length")));
        }
        let id_len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        if end - pos < id_len {
            return Err(err(format!("record {rec}: truncated id ({id_len} bytes declared)")));
        }
        let id = std::str::from_utf8(&bytes[pos..pos + id_len])
            .map_err(|_| err(format!("record {rec}: id is not valid UTF-8")))?
            .to_owned();
        pos += id_len;
        let need = 4 * dim;
        if end - pos < need {
            return Err(err(format!(
                "record {rec} (`{id}`): expected {dim} values, only {} remain",
                (end - pos) / 4
            )));
        }
        for (k, c) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
            vals[k] = f32::from_le_bytes(c.try_into().unwrap());
        }
        pos += need;
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(err(format!("record {rec} (`{id}`): non-finite value at index {k}")));
        }
        if store.position(&id).is_some() {
            return Err(err(format!("record {rec}: duplicate utterance id `{id}`")));
        }
        store.insert(id, &vals)?;
    }
    if pos != end {
        return Err(err(format!(
            "{} unexpected bytes after {count} records",
            end - pos
        )));
    }
    let stored = u32::from_le_bytes(bytes[end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..end]) != stored {
        return Err(err("CRC-32 mismatch".into()));
    }
    Ok(store)
}

pub fn write_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
