//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LGDCKPT\0"
//! version    u32      (currently 1)
//! hash_len   u32, then hash_len bytes of UTF-8 config hash
//! meta_len   u64, then meta_len bytes of UTF-8 JSON metadata
//! n_entries  u64
//! entry*     name_len u32, name bytes, ndim u32, ndim x u64 dims,
//!            prod(dims) x f64 row-major values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LGDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self { config_hash: config_hash.into(), metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_params(&mut self, store: &ParamStore) {
        for p in store.iter() {
            self.push(p.name(), p.value().clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every store parameter from the entry of the same name.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name().to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            store
                .set_value(id, t.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let hash = self.config_hash.as_bytes();
        w.write_all(&(hash.len() as u32).to_le_bytes())?;
        w.write_all(hash)?;
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash_len = read_u32(&mut r)? as usize;
        let config_hash = read_string(&mut r, hash_len)?;
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta)?;
        let n = read_u64(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { config_hash, metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
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

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
}
