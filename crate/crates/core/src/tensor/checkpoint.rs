//! `XFTN` named-tensor container.
//!
//! Layout: magic `XFTN`, format version `u16`, parameter count `u32`, then per
//! parameter: name length `u16` + UTF-8 name, rank `u8`, extents `u32` each,
//! raw little-endian `f32` payload.

use std::path::Path;

use super::Tensor;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XFTN";
pub const VERSION: u16 = 1;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("XFTN", format!("missing tensor {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(u32::try_from(self.entries.len()).map_err(|_| Error::invalid("too many tensors"))?);
        for (name, t) in &self.entries {
            w.string_u16(name)?;
            w.u8(u8::try_from(t.rank()).map_err(|_| Error::invalid("rank exceeds 255"))?);
            for &e in t.shape() {
                w.u32(u32::try_from(e).map_err(|_| Error::invalid("extent exceeds u32"))?);
            }
            w.f32s(t.data());
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "XFTN");
        let archive = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(archive)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(
                "XFTN",
                format!("unsupported format version {version} (this build reads {VERSION})"),
            ));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string_u16()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.position();
            let data = r.f32s(n)?;
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format("XFTN", format!("tensor {name:?} at byte {at}: {e}")))?;
            entries.push((name, t));
        }
        Ok(TensorArchive { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&bytes)
    }
}
