//! Binary tensor checkpoints.
//!
//! Layout: the 8-byte magic `FIGCKPT1`, then one record per tensor until end
//! of file. A record is the name length (u64), the UTF-8 name bytes, the rank
//! (u64), each extent (u64), and the payload as f32 values. All integers and
//! floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FIGCKPT1";

pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated record at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing FIGCKPT1 magic".into()));
    }
    let mut cur = Cursor { buf: bytes, pos: 8 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u64()? as usize;
        if rank > 16 {
            return Err(Error::Checkpoint(format!("tensor `{}` has implausible rank {}", name, rank)));
        }
        let shape = (0..rank)
            .map(|_| cur.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let payload = cur.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(&encode_checkpoint(tensors))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    decode_checkpoint(&buf)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian_records() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_checkpoint(&[("ab".to_string(), t.clone())]);
        assert_eq!(&bytes[..8], b"FIGCKPT1");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &2u64.to_le_bytes());
        assert_eq!(&bytes[34..38], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 42);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode_checkpoint(&[("w".to_string(), t)]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
