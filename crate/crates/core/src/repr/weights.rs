//! Binary weight container.
//!
//! ```text
//! "LSRV" | u16 version | u8 method tag
//! u32 len | EncoderSpec JSON
//! u32 len | training digest (UTF-8)
//! u32 tensor count
//! per tensor: u16 len | name | u8 rank | u32 dims… | f32 payload
//! u32 CRC32 of all payload bytes
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{param_layout, EncoderSpec, Method, Model};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LSRV";
pub const WEIGHT_FORMAT_VERSION: u16 = 1;

fn bad(field: &'static str, reason: impl Into<String>) -> Error {
    Error::WeightFile { field, reason: reason.into() }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    out.push(model.method().tag());
    let spec = serde_json::to_vec(model.spec()).expect("spec serializes");
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(model.train_digest.len() as u32).to_le_bytes());
    out.extend_from_slice(model.train_digest.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for ((name, _), t) in param_layout(model.spec()).iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(field, "file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("four bytes")))
    }
}

/// Parses a weight container. With `expected`, a different method tag is an error.
pub fn from_bytes(bytes: &[u8], expected: Option<Method>) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("magic", "not a weight file"));
    }
    let version = r.u16("version")?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(bad("version", format!("unsupported version {version}")));
    }
    let tag = r.u8("method")?;
    let method = Method::from_tag(tag).ok_or_else(|| bad("method", format!("unknown tag {tag}")))?;
    if let Some(want) = expected {
        if want != method {
            return Err(bad("method", format!("file holds a {method} model, expected {want}")));
        }
    }
    let len = r.u32("spec")? as usize;
    let spec: EncoderSpec = serde_json::from_slice(r.take(len, "spec")?).map_err(|e| bad("spec", e.to_string()))?;
    if spec.method != method {
        return Err(bad("spec", format!("spec says {} but the tag says {method}", spec.method)));
    }
    spec.validate().map_err(|e| bad("spec", e.to_string()))?;
    let len = r.u32("digest")? as usize;
    let digest = std::str::from_utf8(r.take(len, "digest")?).map_err(|_| bad("digest", "not UTF-8"))?.to_string();
    let layout = param_layout(&spec);
    let count = r.u32("tensor_count")? as usize;
    if count != layout.len() {
        return Err(bad("tensor_count", format!("{count} tensors, layout needs {}", layout.len())));
    }
    let mut crc = crc32fast::Hasher::new();
    let mut params = Vec::with_capacity(count);
    for (want_name, want_shape) in &layout {
        let len = r.u16("tensor_name")? as usize;
        let name = r.take(len, "tensor_name")?;
        if name != want_name.as_bytes() {
            return Err(bad("tensor_name", format!("found {:?}, expected {want_name}", String::from_utf8_lossy(name))));
        }
        let rank = r.u8("tensor_rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("tensor_dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(bad("tensor_dims", format!("{want_name}: {shape:?}, expected {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let payload = r.take(4 * n, "tensor_payload")?;
        crc.update(payload);
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        params.push(Tensor::new(shape, data)?);
    }
    let stored = r.u32("checksum")?;
    if stored != crc.finalize() {
        return Err(bad("checksum", "payload CRC32 mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(bad("checksum", "trailing bytes after checksum"));
    }
    Model::from_parts(spec, params, digest)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<Method>) -> Result<Model> {
    from_bytes(&fs::read(path)?, expected)
}
