//! Named-tensor archive used for model and training-state checkpoints.
//!
//! ```text
//! magic   8 bytes  "M2PCKPT\0"
//! version u32 LE
//! hlen    u64 LE
//! header  hlen bytes of JSON: {dtype, meta, tensors: [{name, shape, offset}]}
//! payload raw little-endian scalars, offsets in elements
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: [u8; 8] = *b"M2PCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Archive<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Fills `store` from the tensors under `prefix/`; every parameter must
    /// be present with its exact shape and no extra names may exist.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let tag = format!("{prefix}/");
        let found = self.tensors.iter().filter(|(n, _)| n.starts_with(&tag)).count();
        if found != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{prefix}: archive has {found} tensors, model has {}",
                store.len()
            )));
        }
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let t = self
                .get(&format!("{tag}{name}"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {tag}{name}")))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            dtype: T::NAME.into(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * T::BYTES);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::TruncatedPayload {
                expected: 20,
                found: bytes.len(),
            });
        }
        if bytes[..8] != MAGIC {
            return Err(Error::BadMagic { what: "checkpoint" });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::TruncatedPayload {
                expected: 20 + hlen,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.dtype != T::NAME {
            return Err(Error::CheckpointMismatch(format!(
                "dtype {} where {} expected",
                header.dtype,
                T::NAME
            )));
        }
        let payload = &body[hlen..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * T::BYTES {
            return Err(Error::TruncatedPayload {
                expected: 20 + hlen + total * T::BYTES,
                found: bytes.len(),
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if (e.offset + n) * T::BYTES > payload.len() {
                return Err(Error::MalformedHeader(format!("{} overruns the payload", e.name)));
            }
            let data = payload[e.offset * T::BYTES..(e.offset + n) * T::BYTES]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
