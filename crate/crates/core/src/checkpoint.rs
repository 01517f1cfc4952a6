//! Flat binary parameter file.
//!
//! Layout: `"MHCV"`, `u32` version, then until end of file one record per
//! tensor: `u32` name length, UTF-8 name, `u32` rank, rank × `u64` dims,
//! `f64` little-endian values. All integers are little-endian.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MHCV";
const VERSION: u32 = 1;

pub type Record = (String, Tensor);

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("checkpoint record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Data(format!("record `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.filter(|&n| n <= (bytes.len() - r.pos) / 8).ok_or_else(|| {
            Error::Data(format!("record `{name}` with shape {shape:?} overruns the file"))
        })?;
        let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let odd = [f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, 1e300, -7.5e-310];
        let records = vec![
            ("a".to_string(), Tensor::vector(odd.to_vec())),
            ("b.c".to_string(), Tensor::new(vec![1, 2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap()),
        ];
        let back = decode_records(&encode_records(&records)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in records.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_records(&[("w".into(), Tensor::ones(&[2, 2]))]);
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_records(b"NOPE\x01\0\0\0").is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode_records(&bad_version).is_err());
    }
}
