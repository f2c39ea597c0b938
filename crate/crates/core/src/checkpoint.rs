//! Binary checkpoint container for named tensors.
//!
//! Little-endian layout: magic `ILRA`, `u32` version, `u32` tensor count;
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, one `u64`
//! extent per dimension, a one-byte dtype tag (1 = f32, 2 = f64), and the raw
//! scalar payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Dtype, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"ILRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("tensor {name:?} has dtype {got:?}, expected {want:?}")]
    DtypeMismatch { name: String, got: Dtype, want: Dtype },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// One stored tensor: shape, dtype, and raw values widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Entry {
        Entry {
            shape: t.shape().to_vec(),
            dtype: E::DTYPE,
            values: t.data().iter().map(|v| v.widen_f64()).collect(),
        }
    }

    pub fn to_tensor<E: Element>(&self, name: &str) -> Result<Tensor<E>> {
        if self.dtype != E::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name: name.to_string(),
                got: self.dtype,
                want: E::DTYPE,
            });
        }
        let data: Vec<E> = self.values.iter().map(|v| E::from_f64(*v)).collect();
        Tensor::from_vec(&self.shape, data).map_err(|_| CheckpointError::ShapeMismatch {
            name: name.to_string(),
            got: self.shape.clone(),
            want: self.shape.clone(),
        })
    }
}

/// An ordered name -> tensor map with binary (de)serialization.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert<E: Element>(&mut self, name: &str, t: &Tensor<E>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        self.entries.insert(name.to_string(), Entry::from_tensor(t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn require<E: Element>(&self, name: &str, shape: &[usize]) -> Result<Tensor<E>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                got: entry.shape.clone(),
                want: shape.to_vec(),
            });
        }
        entry.to_tensor(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
            for &e in &entry.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            w.write_all(&[entry.dtype.tag()])?;
            let mut payload = Vec::with_capacity(entry.values.len() * entry.dtype.byte_width());
            match entry.dtype {
                Dtype::F32 => {
                    for &v in &entry.values {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in &entry.values {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = read_u32(r)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                shape.push(u64::from_le_bytes(buf) as usize);
            }
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let dtype = Dtype::from_tag(tag[0]).ok_or(CheckpointError::BadDtype(tag[0]))?;
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * dtype.byte_width()];
            r.read_exact(&mut payload)?;
            let values = match dtype {
                Dtype::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
                Dtype::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if entries.insert(name.clone(), Entry { shape, dtype, values }).is_some() {
                return Err(CheckpointError::DuplicateName(name));
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write cannot fail");
        out
    }
}

fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let mut ck = Checkpoint::new();
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-9, 7.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[4], vec![1.5, 2.5, -0.5, 0.0]).unwrap();
        ck.insert("L0.V.A", &a).unwrap();
        ck.insert("L0.V.gamma", &b).unwrap();

        let back = Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap();
        let a2: Tensor<f64> = back.require("L0.V.A", &[2, 3]).unwrap();
        assert_eq!(a2.data_vec(), a.data_vec());
        let b2: Tensor<f32> = back.require("L0.V.gamma", &[4]).unwrap();
        assert_eq!(b2.data_vec(), b.data_vec());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn serialization_is_byte_stable() {
        let mut ck = Checkpoint::new();
        let t = Tensor::<f64>::from_vec(&[2], vec![0.125, -4.0]).unwrap();
        ck.insert("x", &t).unwrap();
        assert_eq!(ck.to_bytes(), ck.to_bytes());
    }
}
