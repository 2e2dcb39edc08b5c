//! Named-tensor container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "LEANET01"
//! meta_count   { key_len key_bytes value_len value_bytes } * meta_count
//! tensor_count { name_len name_bytes rank extent * rank f32 * product(extents) } * tensor_count
//! ```
//!
//! Metadata entries and tensors keep their insertion order, so writing the same
//! checkpoint twice yields identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 8] = b"LEANET01";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.push((key.into(), value.into()));
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn namespace<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            bail!(Checkpoint, "missing LEANET01 magic");
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.metadata.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 4 {
                bail!(Checkpoint, "tensor {name} has rank {rank}");
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} is too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ck.tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            bail!(Checkpoint, "{} trailing bytes", bytes.len() - r.pos);
        }
        Ok(ck)
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!(Checkpoint, "truncated at byte {}", self.pos);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian_with_magic() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::new(&[2], vec![1.0, -2.5]).unwrap());
        let b = ck.to_bytes();
        assert_eq!(&b[..8], b"LEANET01");
        assert_eq!(&b[8..12], &0u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..21], b"w");
        assert_eq!(&b[21..25], &1u32.to_le_bytes());
        assert_eq!(&b[25..29], &2u32.to_le_bytes());
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(&b[33..37], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"LEANET02\0\0\0\0\0\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.push("x", Tensor::ones(&[3, 3]));
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::vec(
                ("[a-z/._0-9]{1,12}", prop::collection::vec(1usize..4, 0..4), any::<u32>()),
                0..5
            ),
            meta in prop::collection::vec(("[a-z]{1,6}", ".{0,10}"), 0..3),
        ) {
            let mut ck = Checkpoint::new();
            for (k, v) in meta {
                ck.push_meta(k, v);
            }
            for (name, shape, seed) in entries {
                let t = Tensor::from_fn(&shape, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff));
                ck.push(name, t);
            }
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, ck);
        }
    }
}
