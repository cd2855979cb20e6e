//! Inference-only transformer with incremental (KV-cached) decoding.
//! Weights are either float or int8; the layer code is shared.

use super::kernels::{dot_f32, linear_f32, linear_i8};
use super::quant::{QTensor, QuantizedParams};
use crate::model::transformer::{log_softmax_in_place, positional_encoding};
use crate::model::{ModelConfig, TransformerParams};
use crate::subword::BOS;
use crate::{Error, Result};

const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone)]
enum Weight {
    F32(Vec<f32>),
    I8 { q: Vec<i8>, scales: Vec<f32> },
}

impl Weight {
    fn row_into(&self, r: usize, cols: usize, out: &mut [f32]) {
        match self {
            Weight::F32(w) => out.copy_from_slice(&w[r * cols..(r + 1) * cols]),
            Weight::I8 { q, scales } => {
                for (o, &v) in out.iter_mut().zip(&q[r * cols..(r + 1) * cols]) {
                    *o = v as f32 * scales[r];
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Weight,
    b: Vec<f32>,
    out: usize,
}

impl Linear {
    fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        match &self.w {
            Weight::F32(w) => linear_f32(x, rows, w, &self.b, self.out),
            Weight::I8 { q, scales } => linear_i8(x, rows, q, scales, &self.b, self.out),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    g: Vec<f32>,
    b: Vec<f32>,
}

impl LayerNorm {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.g.len();
        let mut y = vec![0f32; x.len()];
        for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                out[i] = (row[i] - mean) * rs * self.g[i] + self.b[i];
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct EncLayer {
    n1: LayerNorm,
    attn: Attn,
    n2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct DecLayer {
    n1: LayerNorm,
    self_attn: Attn,
    n2: LayerNorm,
    cross: Attn,
    n3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Immutable, thread-shareable model for decoding.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub config: ModelConfig,
    /// `None` when the embedding is tied to the output projection.
    embed: Option<Weight>,
    out: Linear,
    enc: Vec<EncLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecLayer>,
    dec_norm: LayerNorm,
    pe: Vec<f32>,
}

/// Encoder result: per decoder layer, the projected cross-attention keys
/// and values.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub src_len: usize,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Self-attention keys/values of the positions decoded so far.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
    pub len: usize,
}

enum Source<'a> {
    Float(&'a TransformerParams<f32>),
    Quant(&'a QuantizedParams),
}

impl Source<'_> {
    fn vector(&self, name: &str) -> Result<Vec<f32>> {
        let missing = || Error::ShapeMismatch(format!("missing tensor {name}"));
        match self {
            Source::Float(p) => p.tensor(name).map(<[f32]>::to_vec).ok_or_else(missing),
            Source::Quant(q) => match q.get(name) {
                Some(QTensor::Float(v)) => Ok(v.clone()),
                _ => Err(missing()),
            },
        }
    }

    fn weight(&self, name: &str) -> Result<Weight> {
        match self {
            Source::Float(_) => self.vector(name).map(Weight::F32),
            Source::Quant(q) => match q.get(name) {
                Some(QTensor::Int8 { q, scales, .. }) => Ok(Weight::I8 { q: q.clone(), scales: scales.clone() }),
                _ => Err(Error::ShapeMismatch(format!("missing int8 tensor {name}"))),
            },
        }
    }

    fn linear(&self, prefix: &str, out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(&format!("{prefix}.weight"))?,
            b: self.vector(&format!("{prefix}.bias"))?,
            out,
        })
    }

    fn norm(&self, prefix: &str) -> Result<LayerNorm> {
        Ok(LayerNorm {
            g: self.vector(&format!("{prefix}.gamma"))?,
            b: self.vector(&format!("{prefix}.beta"))?,
        })
    }

    fn attn(&self, prefix: &str, d: usize) -> Result<Attn> {
        Ok(Attn {
            q: self.linear(&format!("{prefix}.q"), d)?,
            k: self.linear(&format!("{prefix}.k"), d)?,
            v: self.linear(&format!("{prefix}.v"), d)?,
            o: self.linear(&format!("{prefix}.o"), d)?,
        })
    }
}

impl InferenceModel {
    pub fn from_params(params: &TransformerParams<f32>) -> Result<Self> {
        Self::build(&params.config, Source::Float(params))
    }

    pub fn from_quantized(q: &QuantizedParams) -> Result<Self> {
        Self::build(&q.config, Source::Quant(q))
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.out.w, Weight::I8 { .. })
    }

    fn build(cfg: &ModelConfig, src: Source<'_>) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (embed, out) = if cfg.tied_embeddings {
            (None, Linear { w: src.weight("embed")?, b: src.vector("output.bias")?, out: v })
        } else {
            (Some(src.weight("embed")?), src.linear("output", v)?)
        };
        let enc = (0..cfg.n_layers)
            .map(|i| {
                Ok(EncLayer {
                    n1: src.norm(&format!("enc.{i}.attn_norm"))?,
                    attn: src.attn(&format!("enc.{i}.attn"), d)?,
                    n2: src.norm(&format!("enc.{i}.ffn_norm"))?,
                    ff1: src.linear(&format!("enc.{i}.ffn.in"), f)?,
                    ff2: src.linear(&format!("enc.{i}.ffn.out"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.n_layers)
            .map(|i| {
                Ok(DecLayer {
                    n1: src.norm(&format!("dec.{i}.self_norm"))?,
                    self_attn: src.attn(&format!("dec.{i}.self_attn"), d)?,
                    n2: src.norm(&format!("dec.{i}.cross_norm"))?,
                    cross: src.attn(&format!("dec.{i}.cross_attn"), d)?,
                    n3: src.norm(&format!("dec.{i}.ffn_norm"))?,
                    ff1: src.linear(&format!("dec.{i}.ffn.in"), f)?,
                    ff2: src.linear(&format!("dec.{i}.ffn.out"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            embed,
            out,
            enc,
            enc_norm: src.norm("enc.final_norm")?,
            dec,
            dec_norm: src.norm("dec.final_norm")?,
            pe: positional_encoding::<f32>(cfg.max_positions, d),
        })
    }

    fn embed_row(&self, id: u32, pos: usize, out: &mut [f32]) {
        let d = self.config.d_model;
        self.embed.as_ref().unwrap_or(&self.out.w).row_into(id as usize, d, out);
        let scale = (d as f32).sqrt();
        for (i, x) in out.iter_mut().enumerate() {
            *x = *x * scale + self.pe[pos * d + i];
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(&bad) => Err(Error::UnknownTokenId(bad)),
            None => Ok(()),
        }
    }

    pub fn encode(&self, source_ids: &[u32]) -> Result<EncoderOutput> {
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let s = source_ids.len();
        if s > self.config.max_positions {
            return Err(Error::ExceedsMaxPositions { len: s, max: self.config.max_positions });
        }
        if s == 0 {
            return Err(Error::Protocol("empty source sequence".into()));
        }
        self.check_ids(source_ids)?;
        let mut x = vec![0f32; s * d];
        for (p, &id) in source_ids.iter().enumerate() {
            self.embed_row(id, p, &mut x[p * d..(p + 1) * d]);
        }
        for l in &self.enc {
            let h1 = l.n1.apply(&x);
            let q = l.attn.q.apply(&h1, s);
            let k = l.attn.k.apply(&h1, s);
            let v = l.attn.v.apply(&h1, s);
            let ctx = attend(&q, s, &k, &v, s, d, h, None);
            add_into(&mut x, &l.attn.o.apply(&ctx, s));
            let h2 = l.n2.apply(&x);
            let mut u = l.ff1.apply(&h2, s);
            relu(&mut u);
            add_into(&mut x, &l.ff2.apply(&u, s));
        }
        let mem = self.enc_norm.apply(&x);
        let cross = self
            .dec
            .iter()
            .map(|l| (l.cross.k.apply(&mem, s), l.cross.v.apply(&mem, s)))
            .collect();
        Ok(EncoderOutput { src_len: s, cross })
    }

    pub fn new_cache(&self) -> DecoderCache {
        DecoderCache { layers: vec![(Vec::new(), Vec::new()); self.dec.len()], len: 0 }
    }

    /// Feeds one token per cache and returns `[caches.len(), vocab]`
    /// log-probabilities for the next position.
    pub fn step(&self, enc: &EncoderOutput, caches: &mut [DecoderCache], tokens: &[u32]) -> Result<Vec<f32>> {
        assert_eq!(caches.len(), tokens.len());
        let (d, h, v) = (self.config.d_model, self.config.n_heads, self.config.vocab_size);
        let rows = tokens.len();
        self.check_ids(tokens)?;
        let mut y = vec![0f32; rows * d];
        for (r, (&t, c)) in tokens.iter().zip(caches.iter()).enumerate() {
            if c.len + 1 > self.config.max_positions {
                return Err(Error::ExceedsMaxPositions { len: c.len + 1, max: self.config.max_positions });
            }
            self.embed_row(t, c.len, &mut y[r * d..(r + 1) * d]);
        }
        for (li, l) in self.dec.iter().enumerate() {
            let h1 = l.n1.apply(&y);
            let q = l.self_attn.q.apply(&h1, rows);
            let k = l.self_attn.k.apply(&h1, rows);
            let val = l.self_attn.v.apply(&h1, rows);
            let mut ctx = vec![0f32; rows * d];
            for (r, c) in caches.iter_mut().enumerate() {
                let (ck, cv) = &mut c.layers[li];
                ck.extend_from_slice(&k[r * d..(r + 1) * d]);
                cv.extend_from_slice(&val[r * d..(r + 1) * d]);
                let n = ck.len() / d;
                let out = attend(&q[r * d..(r + 1) * d], 1, ck, cv, n, d, h, None);
                ctx[r * d..(r + 1) * d].copy_from_slice(&out);
            }
            add_into(&mut y, &l.self_attn.o.apply(&ctx, rows));
            let h2 = l.n2.apply(&y);
            let q = l.cross.q.apply(&h2, rows);
            let (ek, ev) = &enc.cross[li];
            let ctx = attend(&q, rows, ek, ev, enc.src_len, d, h, Some(()));
            add_into(&mut y, &l.cross.o.apply(&ctx, rows));
            let h3 = l.n3.apply(&y);
            let mut u = l.ff1.apply(&h3, rows);
            relu(&mut u);
            add_into(&mut y, &l.ff2.apply(&u, rows));
        }
        for c in caches.iter_mut() {
            c.len += 1;
        }
        let z = self.dec_norm.apply(&y);
        let mut logits = self.out.apply(&z, rows);
        for row in logits.chunks_exact_mut(v) {
            log_softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Same contract as [`crate::model::forward`]: `prefix.len() + 1` rows.
    pub fn forward(&self, source_ids: &[u32], target_prefix_ids: &[u32]) -> Result<Vec<Vec<f32>>> {
        let enc = self.encode(source_ids)?;
        let mut cache = [self.new_cache()];
        let mut rows = Vec::with_capacity(target_prefix_ids.len() + 1);
        for &t in std::iter::once(&BOS).chain(target_prefix_ids) {
            rows.push(self.step(&enc, &mut cache, &[t])?);
        }
        Ok(rows)
    }
}

fn add_into(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn relu(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Unmasked multi-head attention of `tq` query rows over `tk` keys; each
/// query sees every key (callers pass only visible keys).
#[allow(clippy::too_many_arguments)]
fn attend(q: &[f32], tq: usize, k: &[f32], v: &[f32], tk: usize, d: usize, heads: usize, _cross: Option<()>) -> Vec<f32> {
    let dk = d / heads;
    let scale = 1.0 / (dk as f32).sqrt();
    let mut out = vec![0f32; tq * d];
    let mut w = vec![0f32; tk];
    for i in 0..tq {
        for h in 0..heads {
            let qi = &q[i * d + h * dk..i * d + (h + 1) * dk];
            let mut max = f32::NEG_INFINITY;
            for j in 0..tk {
                w[j] = dot_f32(qi, &k[j * d + h * dk..j * d + (h + 1) * dk]) * scale;
                max = max.max(w[j]);
            }
            let mut sum = 0.0;
            for x in w.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let o = &mut out[i * d + h * dk..i * d + (h + 1) * dk];
            for j in 0..tk {
                let p = w[j] / sum;
                for (a, &b) in o.iter_mut().zip(&v[j * d + h * dk..j * d + (h + 1) * dk]) {
                    *a += p * b;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::quant::quantize_int8;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> TransformerParams<f32> {
        let cfg = ModelConfig { d_model: 32, n_heads: 4, d_ff: 64, dropout: 0.0, ..ModelConfig::desk(30) };
        TransformerParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn matches_training_forward() {
        let p = params();
        let m = InferenceModel::from_params(&p).unwrap();
        let (src, prefix) = ([12u32, 13, 14, 15, 9], [20u32, 21, 22]);
        let a = crate::model::forward(&p, &src, &prefix).unwrap();
        let b = m.forward(&src, &prefix).unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn untied_model_matches_too() {
        let mut p = params();
        p = TransformerParams::init(&ModelConfig { tied_embeddings: false, ..p.config.clone() }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let m = InferenceModel::from_params(&p).unwrap();
        let a = crate::model::forward(&p, &[10, 11], &[12]).unwrap();
        let b = m.forward(&[10, 11], &[12]).unwrap();
        assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-4));
    }

    #[test]
    fn quantized_rows_normalize() {
        let q = quantize_int8(&params()).unwrap();
        let m = InferenceModel::from_quantized(&q).unwrap();
        assert!(m.is_quantized());
        for row in m.forward(&[12, 13, 9], &[20, 21]).unwrap() {
            let s: f32 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_overlong_source() {
        let m = InferenceModel::from_params(&params()).unwrap();
        assert!(matches!(m.encode(&vec![12; 300]), Err(Error::ExceedsMaxPositions { .. })));
        assert!(matches!(m.encode(&[99]), Err(Error::UnknownTokenId(99))));
    }
}
