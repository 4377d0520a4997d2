//! Named tensor files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CATPW1\n"
//! tensor_count
//! repeated tensor_count times:
//!     name_len, name (UTF-8), rank, dims[rank], payload (f32 LE, row-major)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"CATPW1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::WeightFormat(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Tensors keyed by canonical name; iteration (and file) order is sorted.
pub type WeightMap = BTreeMap<String, Tensor>;

pub fn encode_weights(map: &WeightMap) -> Result<Vec<u8>> {
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::WeightFormat(format!("{what} {v} exceeds u32")))
    };
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&u32_of(map.len(), "tensor count")?.to_le_bytes());
    for (name, t) in map {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::WeightFormat(format!("tensor {name}: dims disagree with payload")));
        }
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.dims.len(), "rank")?.to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFormat(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a whole weight file. Nothing is returned unless every tensor
/// decodes.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let count = r.u32("tensor count")?;
    let mut map = WeightMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")?;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32("dimension")?);
        }
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::WeightFormat(format!("tensor {name}: size overflow")))?;
        let payload = r.take(elems, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if map.contains_key(&name) {
            return Err(Error::WeightFormat(format!("duplicate tensor name {name}")));
        }
        map.insert(name, Tensor { dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(map)
}

pub fn read_weight_file(path: &Path) -> Result<WeightMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

pub fn write_weight_file(path: &Path, map: &WeightMap) -> Result<()> {
    let bytes = encode_weights(map)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
