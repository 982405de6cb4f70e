//! NTW named-tensor files.
//!
//! Layout, little-endian and unpadded: magic `NTW1`, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` dtype code (`0` =
//! f32), a `u8` rank, `rank` `u32` dims and the row-major f32 data.

use std::fs;
use std::path::Path;

use super::{Model, WeightStore};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NTW1";
const DTYPE_F32: u8 = 0;

pub fn encode<T: Scalar>(store: &WeightStore<T>) -> Result<Vec<u8>> {
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Format("too many tensors for NTW".into()))?;
    let mut out = Vec::with_capacity(8 + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name:?}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor {name} has too many axes")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("tensor {name} dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightStore> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(if magic.starts_with(b"NTW") {
            Error::Format(format!("unsupported NTW version {:?}", magic[3] as char))
        } else {
            Error::Format(format!("bad magic {magic:02x?}, expected \"NTW1\""))
        });
    }
    let count = r.u32("tensor count")?;
    let mut store = WeightStore::new();
    for index in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {index} name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "tensor {name} has unsupported dtype code {dtype}"
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data: Vec<f32> = r
            .take(len, &format!("data of {name}"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if store.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn write_store<T: Scalar>(store: &WeightStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: &Path) -> Result<WeightStore> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Outcome of binding a weight file to a model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindReport {
    pub bound: Vec<String>,
    /// Model parameters left at their current values.
    pub skipped: Vec<String>,
    /// File tensors the model has no parameter for.
    pub extra: Vec<String>,
}

impl<T: Scalar> Model<T> {
    /// Replaces every parameter with the same-named tensor from `store`.
    /// Fails without modifying the model if any parameter is missing or has
    /// a different shape.
    pub fn bind_weights(&mut self, store: &WeightStore) -> Result<BindReport> {
        let expected = self.expected_params();
        let missing: Vec<&str> = expected
            .iter()
            .filter(|(n, _)| !store.contains(n))
            .map(|(n, _)| n.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Load(format!(
                "{} parameter(s) missing from weight file: {}",
                missing.len(),
                missing.join(", ")
            )));
        }
        let mismatched: Vec<String> = expected
            .iter()
            .filter_map(|(n, shape)| {
                let got = store.get(n).expect("checked present").shape();
                (got != shape.as_slice()).then(|| {
                    format!("{n}: model {} vs file {}", fmt_shape(shape), fmt_shape(got))
                })
            })
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::Load(format!(
                "shape mismatch for {}",
                mismatched.join("; ")
            )));
        }
        self.bind_matching(store)
    }

    /// Binds the tensors whose name and shape match and leaves the rest of
    /// the parameters untouched.
    pub fn bind_matching(&mut self, store: &WeightStore) -> Result<BindReport> {
        let mut report = BindReport::default();
        for (name, shape) in self.expected_params() {
            match store.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    self.params.insert(name.clone(), t.cast());
                    report.bound.push(name);
                }
                _ => report.skipped.push(name),
            }
        }
        report.extra = store
            .names()
            .filter(|n| !self.params.contains(n))
            .map(str::to_string)
            .collect();
        Ok(report)
    }
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_store(model.params(), path)
}

/// Reads `path` and binds it strictly; see [`Model::bind_weights`].
pub fn load_weights<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<BindReport> {
    let store = read_store(path)?;
    model.bind_weights(&store)
}
