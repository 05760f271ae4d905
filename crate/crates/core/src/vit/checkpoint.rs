//! Flat checkpoint format.
//!
//! ```text
//! "SMCK" | count: u32
//! per record: name_len: u16 | name (utf-8) | ndim: u8 | dims: u32 × ndim | values: f64 × prod(dims)
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SMCK";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode_checkpoint(records: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Parameter("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parameter("not a checkpoint file".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Parameter("checkpoint name is not utf-8".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(CheckpointRecord {
            name,
            tensor: Tensor::new(shape, values)?,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Parameter("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, records: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(records))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointRecord>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::vit::{Parameters, UpperSegment, VitConfig};

    #[test]
    fn round_trip_model() {
        let up = UpperSegment::init(VitConfig::default(), &mut SeededRng::new(1, 1)).unwrap();
        let named = up.named_tensors();
        let bytes = encode_checkpoint(&named);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), named.len());
        for (rec, (name, t)) in back.iter().zip(&named) {
            assert_eq!(&rec.name, name);
            assert_eq!(&rec.tensor, *t);
        }
    }

    #[test]
    fn record_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_checkpoint(&[("w".to_string(), &t)]);
        let mut expected = b"SMCK".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
