//! Region-feature container: `RGFT` magic, `u32` version, `u64` image count,
//! then per image `u64` id, `u32` regions, `u32` width and `M·F` little-endian
//! `f32` values. Values are widened to `f64` when read.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"RGFT";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(images: &[(u64, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(images.len() as u64).to_le_bytes());
    for (id, t) in images {
        let (m, f) = t.dims2("write_features")?;
        let m32 = u32::try_from(m).map_err(|_| Error::Data(format!("image {id}: too many regions")))?;
        let f32_ = u32::try_from(f).map_err(|_| Error::Data(format!("image {id}: feature dim too large")))?;
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&m32.to_le_bytes());
        out.extend_from_slice(&f32_.to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Data(format!("feature file truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<(u64, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != FEATURE_MAGIC {
        return Err(Error::Data("not a region feature file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Data(format!("unsupported feature file version {version}")));
    }
    let count = r.u64()?;
    let mut images = Vec::new();
    for _ in 0..count {
        let id = r.u64()?;
        let m = r.u32()? as usize;
        let f = r.u32()? as usize;
        if m == 0 || f == 0 {
            return Err(Error::Data(format!("image {id} has an empty {m}x{f} feature matrix")));
        }
        let mut data = Vec::with_capacity(m * f);
        for _ in 0..m * f {
            data.push(f32::from_le_bytes(r.take()?) as f64);
        }
        images.push((id, Tensor::matrix(m, f, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after feature records", bytes.len() - r.pos)));
    }
    Ok(images)
}

pub fn write_features(path: &Path, images: &[(u64, Tensor)]) -> Result<()> {
    std::fs::write(path, encode_features(images)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<(u64, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
