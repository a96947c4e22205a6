//! `PFCT` checkpoint container: a JSON metadata block followed by named,
//! shaped tensors.
//!
//! Layout (little-endian): magic `PFCT`, u32 version (=1), metadata as a
//! length-prefixed UTF-8 JSON object, u32 tensor count, then per tensor a
//! length-prefixed name, u32 rank, u64 extents, and f32 values in row-major
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Parameters;

const MAGIC: &[u8; 4] = b"PFCT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingTensor(format!("metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata {key}={raw:?} is malformed")))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    /// Stores every tensor of `params` as `{prefix}.{name}`, replacing
    /// existing entries of the same name.
    pub fn put_params<P: Parameters + ?Sized>(&mut self, prefix: &str, params: &P) {
        for t in params.tensors() {
            let name = format!("{prefix}.{}", t.name);
            self.tensors.retain(|x| x.name != name);
            self.tensors.push(NamedTensor {
                name,
                shape: t.shape,
                data: t.data.to_vec(),
            });
        }
    }

    /// Fills `params` from `{prefix}.{name}` entries; every tensor must be
    /// present with a matching element count.
    pub fn get_params<P: Parameters + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for t in params.tensors_mut() {
            let name = format!("{prefix}.{}", t.name);
            let stored = self
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if stored.data.len() != t.data.len() {
                return Err(Error::shape(format!(
                    "{name}: checkpoint has {} values, model expects {}",
                    stored.data.len(),
                    t.data.len()
                )));
            }
            t.data.copy_from_slice(&stored.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.meta).expect("string map serializes");
        let mut w = Writer::new();
        w.bytes(MAGIC)
            .u32(VERSION)
            .string(&meta)
            .u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.string(&t.name).u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.f32_slice(&t.data);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "PFCT checkpoint");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion {
                what: "PFCT checkpoint",
                version,
            });
        }
        let meta: BTreeMap<String, String> = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Protocol(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::shape(format!("{name}: tensor size overflows")))?;
            let data = r.f32_vec(n)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        r.finish()?;
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
