//! Versioned binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! header:  magic "RFCK" | version u32 | architecture tag u32 | class count u32
//!          | input height u32 | input width u32 | input channels u32 | tensor count u32
//! record:  name length u32 | name (utf-8) | rank u32 | dims u32 * rank | f32 * prod(dims)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RFCK";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 7 * 4;

pub fn encode<S: Scalar>(params: &ModelParams<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + params.param_count() * 4);
    out.extend_from_slice(&MAGIC);
    let [h, w, c] = params.input_shape();
    for v in [
        FORMAT_VERSION,
        params.architecture().tag(),
        params.class_count() as u32,
        h as u32,
        w as u32,
        c as u32,
        params.entries().len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in params.entries() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, only {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes checkpoint bytes; `path` only labels errors.
pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelParams<S>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(magic.try_into().unwrap()),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let arch = Architecture::from_tag(r.u32("architecture tag")?)?;
    let classes = r.u32("class count")? as usize;
    let input_shape = [
        r.u32("input height")? as usize,
        r.u32("input width")? as usize,
        r.u32("input channels")? as usize,
    ];
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| Error::Format {
                what: "checkpoint",
                detail: format!("tensor {i} name: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| S::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    ModelParams::from_entries(arch, input_shape, classes, entries)
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Hex SHA-256 of the checkpoint encoding; used as the model identity.
pub fn digest<S: Scalar>(params: &ModelParams<S>) -> String {
    hex::encode(Sha256::digest(encode(params)))
}
