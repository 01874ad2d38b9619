//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "TGCK"
//! version    u32       currently 1
//! meta_len   u64       length of the UTF-8 metadata block
//! meta       bytes     free-form UTF-8 (JSON by convention)
//! count      u32       number of tensors
//! repeated `count` times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   payload  f64 × product(dims)
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u64).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u64(r)? as usize;
        let metadata = String::from_utf8(read_bytes(r, meta_len)?)
            .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_bytes(r, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
