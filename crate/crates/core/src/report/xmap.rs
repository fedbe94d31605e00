//! `XMAP` container for a single attribution map.

use std::path::Path;

use crate::attribution::AttributionMap;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const XMAP_MAGIC: &[u8; 4] = b"XMAP";
pub const XMAP_VERSION: u16 = 1;

pub fn encode_map(map: &AttributionMap) -> Result<Vec<u8>> {
    let class = u16::try_from(map.class).map_err(|_| Error::invalid(format!("class {} exceeds u16", map.class)))?;
    let mut w = Writer::default();
    w.bytes(XMAP_MAGIC);
    w.u16(XMAP_VERSION);
    w.string_u16(&map.method)?;
    w.u16(class);
    let shape = map.scores.shape();
    w.u8(u8::try_from(shape.len()).map_err(|_| Error::invalid("rank exceeds u8"))?);
    for &e in shape {
        w.u32(u32::try_from(e).map_err(|_| Error::invalid(format!("extent {e} exceeds u32")))?);
    }
    w.f32s(map.scores.data());
    Ok(w.buf)
}

/// Decodes without re-clamping, so the payload comes back bit for bit.
pub fn decode_map(bytes: &[u8]) -> Result<AttributionMap> {
    let mut r = Reader::new(bytes, "XMAP");
    r.expect_magic(XMAP_MAGIC)?;
    let version = r.u16()?;
    if version != XMAP_VERSION {
        return Err(Error::format(
            "XMAP",
            format!("unsupported version {version} (this build reads version {XMAP_VERSION})"),
        ));
    }
    let method = r.string_u16()?;
    let class = r.u16()? as usize;
    let rank = r.u8()? as usize;
    if rank != 2 {
        return Err(Error::format("XMAP", format!("expected a rank-2 map, found rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::format("XMAP", "extent product overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok(AttributionMap {
        scores: Tensor::new(shape, data)?,
        method,
        class,
    })
}

pub fn save_map(map: &AttributionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_map(map)?).map_err(|e| Error::file(path, e))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<AttributionMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_map(&bytes).map_err(|e| match e {
        Error::Format { format, detail } => Error::Format {
            format,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}
