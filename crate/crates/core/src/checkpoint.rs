//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GSVM"                 magic
//! u16                    format version (1)
//! u32, [u8]              config length, canonical JSON of the ModelConfig
//! u64, [f64]             trainable scalars in canonical parameter order
//! u64, [f64]             batch-norm running statistics, per layer
//!                        (main blocks then auxiliary blocks): mean, then var
//! u32                    CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};

pub const MAGIC: &[u8; 4] = b"GSVM";
pub const VERSION: u16 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let (config, params, stats) = model.parts_for_checkpoint();
    let json = serde_json::to_vec(config).expect("config serialises");
    let mut buf = Vec::with_capacity(32 + json.len() + 8 * (params.len() + stats.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for block in [&params, &stats] {
        buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_block(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(Error::format(path, "file too short for a checkpoint"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not a model checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::format(path, "CRC-32 mismatch (corrupt or truncated file)"));
    }
    let mut r = Reader { buf: body, pos: 4, path };
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(r.take(4, "config length")?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let params = r.f64_block("parameters")?;
    let stats = r.f64_block("running statistics")?;
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after running statistics"));
    }
    let mut model = Model::new(config).map_err(|e| Error::format(path, e.to_string()))?;
    model
        .set_flat_params(&params)
        .and_then(|_| model.set_running_stats(&stats))
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and checks that it holds the expected variant.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: Variant) -> Result<Model> {
    let model = load_checkpoint(&path)?;
    if model.variant() != expected {
        return Err(Error::Config(format!(
            "{} holds a {} model, expected {}",
            path.as_ref().display(),
            model.variant(),
            expected
        )));
    }
    Ok(model)
}
