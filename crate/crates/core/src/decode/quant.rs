use std::path::Path;

use super::kernels::quantize_row;
use crate::model::checkpoint::{decode_container, encode_container, RawTensor};
use crate::model::{ModelConfig, TransformerParams};
use crate::{Error, Result};

/// One tensor of a quantized model. Matrices are int8 with one scale per
/// row; vectors stay float.
#[derive(Debug, Clone, PartialEq)]
pub enum QTensor {
    Int8 { q: Vec<i8>, scales: Vec<f32>, rows: usize, cols: usize },
    Float(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParams {
    pub config: ModelConfig,
    /// Same order and names as the float layout.
    pub tensors: Vec<(String, QTensor)>,
}

/// Per-row symmetric int8 quantization of every weight matrix.
pub fn quantize_int8(params: &TransformerParams<f32>) -> Result<QuantizedParams> {
    params.check_finite()?;
    let tensors = params
        .layout
        .specs
        .iter()
        .map(|spec| {
            let data = &params.data[spec.offset..spec.offset + spec.len()];
            let t = if spec.is_matrix() {
                let (rows, cols) = (spec.shape[0], spec.shape[1]);
                let mut q = vec![0i8; data.len()];
                let scales = (0..rows)
                    .map(|r| quantize_row(&data[r * cols..(r + 1) * cols], &mut q[r * cols..(r + 1) * cols]))
                    .collect();
                QTensor::Int8 { q, scales, rows, cols }
            } else {
                QTensor::Float(data.to_vec())
            };
            (spec.name.clone(), t)
        })
        .collect();
    Ok(QuantizedParams { config: params.config.clone(), tensors })
}

const SCALE_SUFFIX: &str = "@scale";

impl QuantizedParams {
    pub fn get(&self, name: &str) -> Option<&QTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn dequantize(&self) -> Result<TransformerParams<f32>> {
        let mut p = TransformerParams::<f32>::zeros(&self.config)?;
        for (name, t) in &self.tensors {
            let dst = p
                .tensor_mut(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("unknown tensor {name}")))?;
            match t {
                QTensor::Float(v) => dst.copy_from_slice(v),
                QTensor::Int8 { q, scales, cols, .. } => {
                    for (i, (d, &v)) in dst.iter_mut().zip(q).enumerate() {
                        *d = v as f32 * scales[i / cols];
                    }
                }
            }
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::new();
        for (name, t) in &self.tensors {
            match t {
                QTensor::Float(v) => raw.push(RawTensor {
                    name: name.clone(),
                    shape: vec![v.len()],
                    dtype: "f32",
                    bytes: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                }),
                QTensor::Int8 { q, scales, rows, cols } => {
                    raw.push(RawTensor {
                        name: name.clone(),
                        shape: vec![*rows, *cols],
                        dtype: "i8",
                        bytes: q.iter().map(|&x| x as u8).collect(),
                    });
                    raw.push(RawTensor {
                        name: format!("{name}{SCALE_SUFFIX}"),
                        shape: vec![*rows],
                        dtype: "f32",
                        bytes: scales.iter().flat_map(|x| x.to_le_bytes()).collect(),
                    });
                }
            }
        }
        encode_container(&self.config, raw, serde_json::json!({"quantization": "int8-per-row"}))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = decode_container(bytes)?;
        let layout = crate::model::params::Layout::new(&header.config);
        let slice = |e: &crate::model::checkpoint::TensorEntry| &data[e.offset..e.offset + e.nbytes];
        let floats = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
        };
        let mut entries = header.tensors.iter().peekable();
        let mut tensors = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let e = entries
                .next()
                .ok_or_else(|| Error::format("quantized model", format!("missing tensor {}", spec.name)))?;
            if e.name != spec.name {
                return Err(Error::format("quantized model", format!("expected {}, found {}", spec.name, e.name)));
            }
            let t = match e.dtype.as_str() {
                "i8" if spec.is_matrix() && e.shape == spec.shape => {
                    let s = entries
                        .next()
                        .filter(|s| s.name == format!("{}{SCALE_SUFFIX}", spec.name) && s.shape == [spec.shape[0]])
                        .ok_or_else(|| Error::format("quantized model", format!("missing scales for {}", spec.name)))?;
                    QTensor::Int8 {
                        q: slice(e).iter().map(|&b| b as i8).collect(),
                        scales: floats(slice(s)),
                        rows: spec.shape[0],
                        cols: spec.shape[1],
                    }
                }
                "f32" if !spec.is_matrix() && e.shape.iter().product::<usize>() == spec.len() => {
                    QTensor::Float(floats(slice(e)))
                }
                other => {
                    return Err(Error::format(
                        "quantized model",
                        format!("tensor {} has unexpected dtype {other} or shape {:?}", e.name, e.shape),
                    ))
                }
            };
            tensors.push((spec.name.clone(), t));
        }
        if entries.next().is_some() {
            return Err(Error::format("quantized model", "trailing tensors"));
        }
        Ok(Self { config: header.config, tensors })
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

    fn params() -> TransformerParams<f32> {
        let cfg = ModelConfig { vocab_size: 40, ..ModelConfig::desk(40) };
        let cfg = ModelConfig { d_model: 32, d_ff: 64, n_heads: 4, ..cfg };
        TransformerParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn error_is_bounded_by_half_a_step() {
        let p = params();
        let q = quantize_int8(&p).unwrap();
        let d = q.dequantize().unwrap();
        for spec in p.layout.specs.iter().filter(|s| s.is_matrix()) {
            let cols = spec.shape[1];
            let Some(QTensor::Int8 { scales, .. }) = q.get(&spec.name) else { panic!() };
            for i in spec.offset..spec.offset + spec.len() {
                let s = scales[(i - spec.offset) / cols];
                assert!((p.data[i] - d.data[i]).abs() <= s / 2.0 + 1e-7);
            }
        }
    }

    #[test]
    fn serialization_round_trips() {
        let q = quantize_int8(&params()).unwrap();
        let back = QuantizedParams::from_bytes(&q.to_bytes().unwrap()).unwrap();
        assert_eq!(back, q);
        assert!(TransformerParams::<f32>::from_bytes(&q.to_bytes().unwrap()).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = params();
        p.data[5] = f32::NAN;
        assert!(matches!(quantize_int8(&p), Err(Error::NonFinite(_))));
    }
}
