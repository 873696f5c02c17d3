//! Named tensor archive: `AHCKPT1\n`, a little-endian u64 manifest length, a
//! JSON manifest, then a 64-byte aligned data section of little-endian f32.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::graph::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AHCKPT1\n";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset within the data section.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Parameters then buffers.
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            tensors: store.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Overwrites every tensor of `store`; the checkpoint must cover it exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let missing: Vec<&String> = store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !self.tensors.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint lacks {missing:?}")));
        }
        for (name, t) in &self.tensors {
            store.assign(name, t.clone())?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: t.len() * 4,
                };
                offset = align(offset + e.length);
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let header = MAGIC.len() + 8 + manifest.len();
        let data_start = align(header);
        let mut out = Vec::with_capacity(data_start + self.tensors.values().map(|t| align(t.len() * 4)).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.resize(data_start, 0);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(data_start + align(out.len() - data_start), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(Error::Format("truncated header".into()));
        }
        let mlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let header = MAGIC.len() + 8 + mlen;
        if bytes.len() < header {
            return Err(Error::Format("truncated manifest".into()));
        }
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[MAGIC.len() + 8..header])
            .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        let data = bytes.get(align(header)..).unwrap_or(&[]);
        let mut tensors = IndexMap::new();
        for e in manifest {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("`{}`: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.length != n * 4 {
                return Err(Error::Format(format!(
                    "`{}`: manifest length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let raw = data
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| Error::Format(format!("truncated data for `{}`", e.name)))?;
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(e.shape, vals)?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
