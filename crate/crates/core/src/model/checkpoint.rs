//! Binary container for model tensors.
//!
//! ```text
//! b"BSYNCKPT"            8-byte magic
//! u64 LE                 header length in bytes
//! header                 UTF-8 JSON: {version, config, tensors: [{name, shape, dtype, offset, nbytes}], meta}
//! data                   raw little-endian tensor bytes, at the listed offsets
//! ```
//!
//! The same container holds float checkpoints (`f32`/`f64` tensors) and
//! int8 models (`i8` tensors with `f32` companions named `<name>@scale`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, TransformerParams};
use super::scalar::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BSYNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Tensor bytes waiting to be written.
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: &'static str,
    pub bytes: Vec<u8>,
}

pub fn encode_container(config: &ModelConfig, tensors: Vec<RawTensor>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in &tensors {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.dtype.to_string(),
            offset,
            nbytes: t.bytes.len(),
        });
        offset += t.bytes.len();
    }
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors: entries,
        meta,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

/// Parses the header and returns it with the data section.
pub fn decode_container(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::format("checkpoint", "truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {}", header.version)));
    }
    let data = &bytes[16 + len..];
    for t in &header.tensors {
        let width = match t.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            "i8" => 1,
            other => return Err(Error::format("checkpoint", format!("unknown dtype {other}"))),
        };
        if t.nbytes != width * t.shape.iter().product::<usize>() || t.offset + t.nbytes > data.len() {
            return Err(Error::format("checkpoint", format!("tensor {} has inconsistent size", t.name)));
        }
    }
    Ok((header, data))
}

impl<T: Scalar> TransformerParams<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self
            .layout
            .specs
            .iter()
            .map(|s| {
                let mut bytes = Vec::with_capacity(s.len() * T::BYTES);
                for &x in &self.data[s.offset..s.offset + s.len()] {
                    x.write_le(&mut bytes);
                }
                RawTensor { name: s.name.clone(), shape: s.shape.clone(), dtype: T::DTYPE, bytes }
            })
            .collect();
        encode_container(&self.config, tensors, serde_json::Value::Null)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = decode_container(bytes)?;
        let mut params = Self::zeros(&header.config)?;
        let layout = params.layout.clone();
        if header.tensors.len() != layout.specs.len() {
            return Err(Error::format("checkpoint", "tensor count does not match the config"));
        }
        for (entry, spec) in header.tensors.iter().zip(&layout.specs) {
            if entry.name != spec.name || entry.shape != spec.shape || entry.dtype != T::DTYPE {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {} ({}) does not match {} ({})", entry.name, entry.dtype, spec.name, T::DTYPE),
                ));
            }
            let raw = &data[entry.offset..entry.offset + entry.nbytes];
            for (x, chunk) in params.data[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(raw.chunks_exact(T::BYTES))
            {
                *x = T::read_le(chunk);
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.1,
            vocab_size: 13,
            max_positions: 16,
            tied_embeddings: true,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = TransformerParams::<f32>::init(&cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bytes = p.to_bytes().unwrap();
        let q = TransformerParams::<f32>::from_bytes(&bytes).unwrap();
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(q.config, p.config);
        assert!(TransformerParams::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_corruption() {
        let p = TransformerParams::<f32>::zeros(&cfg()).unwrap();
        let mut bytes = p.to_bytes().unwrap();
        assert!(TransformerParams::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(TransformerParams::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn header_is_readable_json() {
        let p = TransformerParams::<f32>::zeros(&cfg()).unwrap();
        let bytes = p.to_bytes().unwrap();
        let (header, _) = decode_container(&bytes).unwrap();
        assert_eq!(header.version, CHECKPOINT_VERSION);
        assert_eq!(header.tensors[0].name, "embed");
        assert_eq!(header.tensors[0].dtype, "f32");
    }
}
