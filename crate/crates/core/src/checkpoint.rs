//! Checkpoint container shared by every model.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "ATLCKPT\0"
//! version      u32       FORMAT_VERSION
//! dtype        u32       0 = f32, 1 = f64
//! kind         u32 len + UTF-8 bytes      model family, e.g. "genre-classifier"
//! metadata     u32 len + UTF-8 JSON       model config and provenance
//! count        u32                        number of arrays
//! per array, in name order:
//!   name       u32 len + UTF-8 bytes
//!   ndim       u32
//!   dims       ndim × u64
//!   data       numel × dtype width
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! reader never observes a partial checkpoint.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ATLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value, params: ParamStore<T>) -> Self {
        Checkpoint {
            kind: kind.into(),
            metadata,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.metadata.to_string());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Decode, converting stored elements to `T` when the dtypes differ.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let dtype = DType::from_code(r.u32()?).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        let kind = r.string()?;
        let metadata = serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.width())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { kind, metadata, params })
    }

    /// Content hash of the encoded checkpoint (first 16 hex digits of SHA-256).
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fail unless this checkpoint belongs to the `expected` model family.
    pub fn expect_kind(&self, expected: &str) -> Result<()> {
        if self.kind != expected {
            return Err(Error::Checkpoint(format!(
                "incompatible checkpoint: kind {:?}, expected {expected:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Write via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}
