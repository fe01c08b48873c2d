//! Binary checkpoint container.
//!
//! Layout: `u64` little-endian header length, a JSON header
//! (`version`, `architecture`, `metadata`, `tensors: [{name, shape, offset}]`),
//! then raw little-endian `f32` blobs. Offsets are in bytes from the start of
//! the blob section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: Value,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Value,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(architecture: Value, metadata: Value) -> Self {
        Self { architecture, metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Tensor `name`, checked against an expected shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.numel();
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let len_bytes: [u8; 8] =
            bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| bad("truncated header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", header.version)));
        }
        let blobs = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = blobs
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| bad(format!("tensor `{}` runs past end of file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Self { architecture: header.architecture, metadata: header.metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_of_f32_representable_values_is_exact() {
        let mut ck = Checkpoint::new(json!({"kind": "toy"}), json!({"seed": 3}));
        ck.push("w", &Tensor::matrix(2, 2, vec![0.5, -1.25, 3.0, 1e-3f32 as f64]).unwrap());
        ck.push("b", &Tensor::vector(vec![7.0]));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.expect("b", &[1]).unwrap().data(), &[7.0]);
        assert!(back.expect("b", &[2]).is_err());
        assert!(back.tensor("nope").is_err());
    }

    #[test]
    fn truncated_files_are_rejected() {
        let mut ck = Checkpoint::new(json!(null), json!(null));
        ck.push("w", &Tensor::vector(vec![1.0, 2.0]));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }
}
