//! Binary weights file.
//!
//! Layout (all integers little-endian): magic `DANW`, `u32` version (1),
//! `u32` tensor count, then per tensor a `u16` name length, the UTF-8 name,
//! a `u8` dtype code (0 = f32, 1 = f64), a `u8` rank, `rank` × `u32` dims
//! and the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

use super::{build_model, DANetConfig, Model};

pub const MAGIC: [u8; 4] = *b"DANW";
pub const VERSION: u32 = 1;

/// One decoded tensor record, payload still in file encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    payload: Vec<u8>,
}

impl WeightRecord {
    /// Payload converted to `T` (exact when widening or when the types match).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.payload.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.payload.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        Tensor::new(&self.shape, data).expect("payload length checked while reading")
    }
}

/// Serializes every tensor of the store (parameters and buffers) in store
/// order.
pub fn write_weights<T: Scalar>(out: &mut impl Write, store: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("write_weights", format!("name too long: {}", e.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(T::DTYPE.code());
        buf.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a weights file image.
pub fn read_weights(bytes: &[u8]) -> Result<Vec<WeightRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, || "magic".into())?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32(|| "version".into())?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32(|| "tensor count".into())? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, || format!("name length of tensor {i}"))?.try_into().unwrap());
        let name_bytes = r.take(len as usize, || format!("name of tensor {i}"))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::invalid("read_weights", format!("name of tensor {i} is not UTF-8")))?;
        let code = r.take(1, || format!("dtype of `{name}`"))?[0];
        let dtype = DType::from_code(code).ok_or(Error::UnsupportedDType(code))?;
        let rank = r.take(1, || format!("rank of `{name}`"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(|| format!("shape of `{name}`"))? as usize);
        }
        let n = shape.iter().try_fold(dtype.size(), |acc: usize, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::invalid("read_weights", format!("shape of `{name}` overflows")))?;
        let payload = r.take(n, || format!("payload of `{name}`"))?.to_vec();
        out.push(WeightRecord { name, dtype, shape, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("read_weights", format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

impl<T: Scalar> Model<T> {
    /// Replaces every stored tensor with the record of the same name.
    ///
    /// Records are validated in file order (unknown name, then shape), and
    /// afterwards every model tensor must have been provided. On error the
    /// model is unchanged.
    pub fn apply_weights(&mut self, records: &[WeightRecord]) -> Result<()> {
        let mut staged = Vec::with_capacity(records.len());
        let mut seen = vec![false; self.store.len()];
        for rec in records {
            let id = self.store.find(&rec.name).ok_or_else(|| Error::UnknownTensor(rec.name.clone()))?;
            let expected = self.store.get(id).shape();
            if expected != rec.shape.as_slice() {
                return Err(Error::WeightShapeMismatch {
                    name: rec.name.clone(),
                    expected: expected.to_vec(),
                    found: rec.shape.clone(),
                });
            }
            seen[id.index()] = true;
            staged.push((id, rec.to_tensor::<T>()));
        }
        if let Some(missing) = self.store.ids().find(|id| !seen[id.index()]) {
            return Err(Error::MissingTensor(self.store.name(missing).to_string()));
        }
        for (id, t) in staged {
            self.store.set(id, t)?;
        }
        Ok(())
    }

    pub fn weights_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(&mut buf, &self.store).expect("writing to memory");
        buf
    }

    /// Writes the weights file next to `path` and renames it into place.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        crate::fsio::write_atomic(path, &self.weights_bytes())
    }

    /// Builds `config` and fills it from a weights file.
    pub fn load(config: &DANetConfig, path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_weights_bytes(config, &bytes)
    }

    pub fn from_weights_bytes(config: &DANetConfig, bytes: &[u8]) -> Result<Self> {
        let records = read_weights(bytes)?;
        let mut model = build_model(config, 0)?;
        model.apply_weights(&records)?;
        Ok(model)
    }
}
