use std::collections::HashMap;
use std::path::Path;

use super::{Real, Tensor};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

/// Named model tensors in declaration order.
///
/// This is the unit clients exchange and the server averages. `flatten`
/// concatenates tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::shape(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// True when names and shapes match entry by entry.
    pub fn same_layout<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Builds a store with this store's layout holding `flat`.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::shape(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in &mut out.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Serializes to the checkpoint layout:
    /// `"CKPT"`, u32 version, u32 count, then per tensor (u32 name length,
    /// name bytes, u32 rank, u32 dims), then all values as f32 in
    /// declaration order. Little-endian throughout.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(16 + 4 * self.numel());
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u32(self.len() as u32);
        for (name, t) in self.iter() {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
        }
        for t in &self.tensors {
            for &v in t.data() {
                w.f32(v.as_f64() as f32);
            }
        }
        w.into_inner()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CKPT_MAGIC)?;
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = r.u32_vec(rank)?.into_iter().map(|d| d as usize).collect::<Vec<_>>();
            manifest.push((name, shape));
        }
        let mut store = Self::new();
        for (name, shape) in manifest {
            let n = shape.iter().product();
            let data = r.f32_vec(n)?.into_iter().map(|v| T::from_f64(v as f64)).collect();
            store.push(&name, Tensor::new(shape, data)?)?;
        }
        r.finish()?;
        Ok(store)
    }
}

pub fn write_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, store.to_checkpoint_bytes())?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path)?;
    ParamStore::from_checkpoint_bytes(&bytes)
}
