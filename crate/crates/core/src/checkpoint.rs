//! Binary checkpoint format.
//!
//! ```text
//! "MCCL" | version: u32 | count: u32 | count x record
//! record = name_len: u32 | name bytes | rank: u32 | dims: rank x u32 | f32 values
//! ```
//!
//! Integers and floats are little-endian; records are sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCCL";
pub const VERSION: u32 = 1;

/// Prefixes of tensors that only training needs.
pub const TRAINING_ONLY: [&str; 2] = ["mcm/", "disc/"];

pub type Tensors = BTreeMap<String, Tensor<f32>>;

pub fn to_bytes(tensors: &Tensors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
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
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensors> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &Tensors) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, to_bytes(tensors)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Tensors> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

/// Drops memory and discriminator tensors.
pub fn strip_training_state(tensors: &Tensors) -> Tensors {
    tensors
        .iter()
        .filter(|(name, _)| !TRAINING_ONLY.iter().any(|p| name.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensors {
        let mut t = BTreeMap::new();
        t.insert("b/x".into(), Tensor::new(&[2, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap());
        t.insert("a".into(), Tensor::scalar(-1.25f32));
        t.insert("disc/w".into(), Tensor::zeros(&[1]));
        t
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = to_bytes(&sample());
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&sample());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn strip_removes_training_state() {
        let s = strip_training_state(&sample());
        assert_eq!(s.keys().collect::<Vec<_>>(), ["a", "b/x"]);
    }
}
