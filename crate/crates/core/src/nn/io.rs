//! Model file: `AFCM` magic, u16 format version, u32 header length, a JSON
//! header (architecture, model version, tensor index), then the tensors as
//! little-endian f32 in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, Model, ModelParams, Tensor, TensorMap};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"AFCM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in floats.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchSpec,
    version: u64,
    tensors: Vec<IndexEntry>,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.params.tensors {
            index.push(IndexEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len();
        }
        let header = Header {
            arch: self.arch.clone(),
            version: self.params.version,
            tensors: index,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 4 * offset);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 10 {
            return Err(Error::Format("model file shorter than its header".into()));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format("missing AFCM magic".into()));
        }
        let fmt = u16::from_le_bytes([bytes[4], bytes[5]]);
        if fmt != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model format version {fmt}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = bytes
            .get(10..10 + hlen)
            .ok_or_else(|| Error::Format("truncated model header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        header.arch.validate()?;
        let payload = &bytes[10 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(Error::Format("payload is not a whole number of floats".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = TensorMap::new();
        let mut used = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", e.name)))?
                .to_vec();
            used += n;
            tensors.insert(e.name, Tensor { shape: e.shape, data });
        }
        if used != floats.len() {
            return Err(Error::Format("payload has unindexed bytes".into()));
        }
        for (name, shape) in header.arch.tensor_shapes() {
            match tensors.get(&name) {
                Some(t) if t.shape == shape => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected: shape,
                        got: t.shape.clone(),
                    })
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        let params = ModelParams {
            version: header.version,
            tensors,
        };
        if !params.is_finite() {
            return Err(Error::Format("non-finite parameter values".into()));
        }
        Ok(Model {
            arch: header.arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_bytes(&fs::read(path)?)
    }
}
