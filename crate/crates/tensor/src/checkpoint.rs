//! Binary weight checkpoints.
//!
//! Layout: the magic bytes `SSTN1`, then for every parameter until end of
//! file: name length (u32 LE), UTF-8 name, rank (u32 LE), each dimension
//! (u32 LE), and the values as f32 LE.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::nn::Module;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 5] = b"SSTN1";

pub type Record = (String, Vec<usize>, Vec<f32>);

pub fn encode(params: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> TensorError {
        TensorError::Checkpoint {
            path: self.path.to_string(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(cur.err("bad magic"));
    }
    cur.pos = MAGIC.len();
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let raw_name = cur.take(len)?.to_vec();
        let name = String::from_utf8(raw_name).map_err(|_| cur.err("parameter name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(cur.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (bytes.len() - cur.pos) / 4)
            .ok_or_else(|| cur.err(format!("dims {shape:?} exceed remaining bytes")))?;
        let raw = cur.take(count * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        debug_assert_eq!(numel(&shape), count);
        records.push((name, shape, data));
    }
    Ok(records)
}

pub fn save<M: Module<f32> + ?Sized>(module: &M, path: &Path) -> Result<()> {
    let named = module.named_params();
    let refs: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
    fs::write(path, encode(&refs)).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_exact_layout() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]);
        let mut want = b"SSTN1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'w');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        let back = decode(&bytes, "mem").unwrap();
        assert_eq!(back, vec![("w".to_string(), vec![2], vec![1.0, -2.0])]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"SSTN2", "mem").is_err());
        let t = Tensor::<f32>::zeros(&[3]);
        let bytes = encode(&[("w".to_string(), &t)]);
        let err = decode(&bytes[..bytes.len() - 2], "mem").unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
    }
}
