//! Single-file checkpoint archive: a versioned header line, a JSON metadata
//! block, and the tensors in safetensors layout.
//!
//! ```text
//! mdba-ckpt-v1\n
//! <u64 little-endian metadata length><metadata JSON>
//! <safetensors bytes>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "mdba-ckpt-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<M> {
    pub meta: M,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn new(meta: M) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), StoredTensor { shape, data });
    }

    pub fn take(&mut self, name: &str) -> Result<StoredTensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), t.shape.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let body = safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER.len() + 9 + meta.len() + body.len());
        out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = CHECKPOINT_HEADER.len() + 1;
        if bytes.len() < head + 8 || &bytes[..head - 1] != CHECKPOINT_HEADER.as_bytes() || bytes[head - 1] != b'\n' {
            return Err(Error::Checkpoint(format!("missing `{CHECKPOINT_HEADER}` header")));
        }
        let len = u64::from_le_bytes(bytes[head..head + 8].try_into().expect("8 bytes")) as usize;
        let meta_end = head + 8 + len;
        if bytes.len() < meta_end {
            return Err(Error::Checkpoint("truncated metadata".into()));
        }
        let meta: M = serde_json::from_slice(&bytes[head + 8..meta_end])?;
        let st = SafeTensors::deserialize(&bytes[meta_end..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}
