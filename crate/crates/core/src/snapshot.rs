//! Named-tensor snapshot files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSLT" | version: u32 | count: u32
//! per tensor: name_len: u32 | name (UTF-8) | rank: u32 | dims: u64 × rank | values: f64 × Π dims
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSLT";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub tensors: Vec<(String, Tensor)>,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Stores non-empty raw bytes as a rank-1 tensor of byte values.
    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) -> Result<()> {
        let name = name.into();
        let t = Tensor::new([bytes.len()], bytes.iter().map(|&b| b as f64).collect())
            .map_err(|_| Error::Snapshot(format!("entry `{name}` has no bytes")))?;
        self.push(name, t);
        Ok(())
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Snapshot(format!("missing entry `{name}`")))?;
        t.data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Snapshot(format!(
                        "entry `{name}` holds non-byte value {v}"
                    )))
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic, expected FSLT".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for k in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Snapshot(format!("tensor {k}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Snapshot(format!(
                    "`{name}`: rank {rank} outside 1..={MAX_RANK}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Snapshot(format!("`{name}`: dimension overflows")))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::Snapshot(format!("`{name}`: element count overflows")))?;
                shape.push(d);
            }
            let nbytes = n
                .checked_mul(8)
                .ok_or_else(|| Error::Snapshot(format!("`{name}`: element count overflows")))?;
            let raw = r.take(nbytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| Error::Snapshot(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Snapshot { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Snapshot(format!("truncated at byte {}", self.pos)))?;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut s = Snapshot::new();
        s.push("a", Tensor::from_fn([2, 3], |i| i as f64 - 2.5));
        s.push("b.c", Tensor::scalar(f64::MIN_POSITIVE));
        s.push_bytes("m", b"{\"x\":1}").unwrap();
        let back = Snapshot::decode(&s.encode()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.get_bytes("m").unwrap(), b"{\"x\":1}");
    }

    #[test]
    fn header_layout() {
        let mut s = Snapshot::new();
        s.push("w", Tensor::new([1], vec![1.0]).unwrap());
        let b = s.encode();
        assert_eq!(&b[..4], b"FSLT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(b.len(), 4 + 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn rejects_damage() {
        let mut s = Snapshot::new();
        s.push("w", Tensor::ones([2, 2]));
        let b = s.encode();
        assert!(Snapshot::decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Snapshot::decode(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(Snapshot::decode(&magic).is_err());
        let mut huge = b;
        huge[21..29].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Snapshot::decode(&huge).is_err());
    }
}
