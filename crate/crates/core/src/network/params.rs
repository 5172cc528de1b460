//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint blob layout (all integers little-endian `u32`):
//!
//! ```text
//! magic   b"DLCK"
//! version 1
//! count   number of tensors
//! repeat count times:
//!     name_len, name (UTF-8 bytes)
//!     ndim, dims[ndim]
//!     trainable (0 or 1)
//!     data: product(dims) little-endian f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"DLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for running statistics.
    pub trainable: bool,
}

/// Ordered, name-addressable parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on duplicate names; parameter layouts are fixed by the code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        let prev = self.index.insert(name.clone(), self.params.len());
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Panics if `name` is unknown.
    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index(name);
        &mut self.params[i].value
    }

    fn index(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }
}

impl ParamStore<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&(p.trainable as u32).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e.to_string()))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::storage(path, "not a checkpoint blob"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::storage(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::storage(path, e.to_string()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let trainable = r.u32()? != 0;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.position(&name).is_some() {
                return Err(Error::storage(path, format!("duplicate tensor {name}")));
            }
            store.add(name, Tensor::from_vec(&shape, data), trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::storage(path, "trailing bytes after last tensor"));
        }
        Ok(store)
    }

    /// Check that `other` has the same names, order and shapes.
    pub fn check_layout(&self, other: &ParamStore<f32>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(format!(
                    "parameter layout mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::storage(self.path, "truncated checkpoint"));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * 0.25 - 1.0), true);
        s.add("a.running_var", Tensor::full(&[2], 1.0), false);
        s.add("scalar", Tensor::from_vec(&[1], vec![f32::MIN_POSITIVE]), true);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let s = store();
        s.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back, s);
        back.check_layout(&s).unwrap();
    }

    #[test]
    fn corrupt_blobs_are_storage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        store().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Storage { .. })));
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Storage { .. })));
    }

    #[test]
    fn layout_mismatch_is_detected() {
        let mut other = store();
        *other.get_mut("a.weight") = Tensor::zeros(&[2, 3, 3, 3]);
        assert!(store().check_layout(&other).is_err());
    }
}
