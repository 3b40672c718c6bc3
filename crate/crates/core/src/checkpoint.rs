//! Binary model checkpoints.
//!
//! Layout (little-endian): `SCSI`, u16 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, four u32 dims and the values as f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SCSI";
pub const VERSION: u16 = 1;

/// A decoded checkpoint entry.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_string();
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape::from(dims);
        let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| Error::format("checkpoint", "oversized tensor"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Copy checkpoint values into a model built from `cfg`. Names, order and
/// shapes must all agree with the architecture.
pub fn load_into<T: Scalar>(cfg: &NetworkConfig, entries: &[NamedTensor]) -> Result<Model<T>> {
    let mut model = Model::from_config(cfg)?;
    let mut params = model.named_params_mut();
    if params.len() != entries.len() {
        return Err(Error::config(format!(
            "architecture mismatch: checkpoint has {} tensors, config expects {}",
            entries.len(),
            params.len()
        )));
    }
    for ((name, t), e) in params.iter_mut().zip(entries) {
        if *name != e.name || t.shape() != e.shape {
            return Err(Error::config(format!(
                "architecture mismatch: checkpoint `{}` {} vs config `{name}` {}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        **t = Tensor::new(e.shape, e.data.iter().map(|v| T::of(*v as f64)).collect())?;
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(cfg: &NetworkConfig, path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(cfg, &decode(&bytes)?)
}
