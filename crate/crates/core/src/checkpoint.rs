//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DIALCKPT`, `u32` version, `u32` record
//! count, then per record a `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims and the `f32` values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataio::write_atomic;
use crate::error::{DialError, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIALCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn scalar_count(&self) -> usize {
        self.records.iter().map(|r| r.values.len()).sum()
    }

    /// Appends every tensor of `params` under `prefix.`.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            let full = format!("{prefix}.{name}");
            if self.records.iter().any(|r| r.name == full) {
                return Err(DialError::Schema(format!("duplicate tensor name {full}")));
            }
            self.records.push(Record {
                name: full,
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.to_f32().unwrap()).collect(),
            });
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.records.iter().any(|r| r.name.starts_with(&p))
    }

    /// Builds replacement tensors for `params` from records under `prefix.`.
    /// Nothing is assigned unless every tensor is present with its shape and
    /// no unknown record shares the prefix.
    pub fn restore_params<T: Scalar>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let p = format!("{prefix}.");
        let by_name: HashMap<&str, &Record> = self
            .records
            .iter()
            .filter_map(|r| r.name.strip_prefix(&p).map(|n| (n, r)))
            .collect();
        let mut fresh = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let r = by_name
                .get(name)
                .ok_or_else(|| DialError::Schema(format!("checkpoint lacks tensor {p}{name}")))?;
            if r.shape != t.shape() {
                return Err(DialError::Schema(format!(
                    "tensor {p}{name} has shape {:?}, model expects {:?}",
                    r.shape,
                    t.shape()
                )));
            }
            fresh.push(Tensor::new(r.shape.clone(), r.values.iter().map(|&v| T::from_f32(v).unwrap()).collect())?);
        }
        if by_name.len() != fresh.len() {
            let extra = by_name
                .keys()
                .find(|n| params.get(n).is_none())
                .map(|n| format!("{p}{n}"))
                .unwrap_or_default();
            return Err(DialError::Schema(format!("checkpoint has unexpected tensor {extra}")));
        }
        for (slot, t) in params.tensors_mut().iter_mut().zip(fresh) {
            *slot = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(DialError::Format {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let at = rd.pos;
        let version = rd.u32()?;
        if version != VERSION {
            return Err(DialError::Format {
                offset: at,
                message: format!("unsupported version {version}"),
            });
        }
        let count = rd.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let at = rd.pos;
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| DialError::Format {
                    offset: at + 4,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            if records.iter().any(|r: &Record| r.name == name) {
                return Err(DialError::Format {
                    offset: at,
                    message: format!("duplicate tensor {name}"),
                });
            }
            let rank = rd.u32()? as usize;
            let shape = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(DialError::Format {
                offset: rd.pos,
                message: "tensor size overflows".into(),
            })?;
            let raw = rd.take(n.checked_mul(4).ok_or(DialError::Format {
                offset: rd.pos,
                message: "tensor size overflows".into(),
            })?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, values });
        }
        if rd.pos != bytes.len() {
            return Err(DialError::Format {
                offset: rd.pos,
                message: "trailing bytes after last record".into(),
            });
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DialError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DialError::Format {
                offset: self.pos,
                message: format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
