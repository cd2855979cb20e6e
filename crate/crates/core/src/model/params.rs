use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// 128 / 2 layers / 4 heads / 512: trains on one CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            dropout: 0.1,
            vocab_size,
            max_positions: 256,
            tied_embeddings: true,
        }
    }

    /// Transformer "big" dimensions.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d_model: 1024,
            n_layers: 6,
            n_heads: 16,
            d_ff: 4096,
            dropout: 0.1,
            vocab_size,
            max_positions: 512,
            tied_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be a positive multiple of n_heads".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("layer, feed-forward, vocab and position sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Lin {
    pub w: usize,
    pub b: usize,
    pub out: usize,
    pub inp: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnH {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerH {
    pub attn_norm: Norm,
    pub attn: AttnH,
    pub ffn_norm: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerH {
    pub self_norm: Norm,
    pub self_attn: AttnH,
    pub cross_norm: Norm,
    pub cross_attn: AttnH,
    pub ffn_norm: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Handles {
    pub embed: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub enc: Vec<EncLayerH>,
    pub enc_norm: Norm,
    pub dec: Vec<DecLayerH>,
    pub dec_norm: Norm,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    pub handles: Handles,
    index: HashMap<String, usize>,
}

struct Builder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        self.total += shape.iter().product::<usize>();
        self.specs.push(TensorSpec { name, shape, offset });
        offset
    }

    fn lin(&mut self, prefix: &str, out: usize, inp: usize) -> Lin {
        Lin {
            w: self.push(format!("{prefix}.weight"), vec![out, inp]),
            b: self.push(format!("{prefix}.bias"), vec![out]),
            out,
            inp,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.push(format!("{prefix}.gamma"), vec![d]),
            b: self.push(format!("{prefix}.beta"), vec![d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnH {
        AttnH {
            q: self.lin(&format!("{prefix}.q"), d, d),
            k: self.lin(&format!("{prefix}.k"), d, d),
            v: self.lin(&format!("{prefix}.v"), d, d),
            o: self.lin(&format!("{prefix}.o"), d, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut b = Builder { specs: Vec::new(), total: 0 };
        let embed = b.push("embed".into(), vec![v, d]);
        let out_w = if cfg.tied_embeddings {
            embed
        } else {
            b.push("output.weight".into(), vec![v, d])
        };
        let out_b = b.push("output.bias".into(), vec![v]);
        let enc = (0..cfg.n_layers)
            .map(|i| EncLayerH {
                attn_norm: b.norm(&format!("enc.{i}.attn_norm"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ffn_norm: b.norm(&format!("enc.{i}.ffn_norm"), d),
                ff1: b.lin(&format!("enc.{i}.ffn.in"), f, d),
                ff2: b.lin(&format!("enc.{i}.ffn.out"), d, f),
            })
            .collect();
        let enc_norm = b.norm("enc.final_norm", d);
        let dec = (0..cfg.n_layers)
            .map(|i| DecLayerH {
                self_norm: b.norm(&format!("dec.{i}.self_norm"), d),
                self_attn: b.attn(&format!("dec.{i}.self_attn"), d),
                cross_norm: b.norm(&format!("dec.{i}.cross_norm"), d),
                cross_attn: b.attn(&format!("dec.{i}.cross_attn"), d),
                ffn_norm: b.norm(&format!("dec.{i}.ffn_norm"), d),
                ff1: b.lin(&format!("dec.{i}.ffn.in"), f, d),
                ff2: b.lin(&format!("dec.{i}.ffn.out"), d, f),
            })
            .collect();
        let dec_norm = b.norm("dec.final_norm", d);
        let index = b.specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self {
            specs: b.specs,
            total: b.total,
            handles: Handles { embed, out_w, out_b, enc, enc_norm, dec, dec_norm },
            index,
        }
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }
}

/// All learnable tensors of the model in one flat buffer, addressed by
/// canonical names.
#[derive(Debug, Clone)]
pub struct TransformerParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> PartialEq for TransformerParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl<T: Scalar> TransformerParams<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        Ok(Self {
            config: config.clone(),
            data: vec![T::zero(); layout.total],
            layout,
        })
    }

    /// Xavier-uniform linear weights, N(0, d^-1/2) embeddings, unit norms,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let layout = p.layout.clone();
        for spec in &layout.specs {
            let slice = &mut p.data[spec.offset..spec.offset + spec.len()];
            if spec.name == "embed" || spec.name == "output.weight" {
                let std = (config.d_model as f64).powf(-0.5);
                for x in slice {
                    // Box-Muller.
                    let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
                    *x = T::c(std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos());
                }
            } else if spec.is_matrix() {
                let limit = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                for x in slice {
                    *x = T::c(rng.gen_range(-limit..limit));
                }
            } else if spec.name.ends_with(".gamma") {
                slice.fill(T::one());
            }
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.spec(name).map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let spec = self.layout.spec(name)?.clone();
        Some(&mut self.data[spec.offset..spec.offset + spec.len()])
    }

    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for spec in &self.layout.specs {
            if self.data[spec.offset..spec.offset + spec.len()].iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(spec.name.clone()));
            }
        }
        Ok(())
    }
}

/// Elementwise mean of checkpoints with identical shapes.
pub fn average_checkpoints<T: Scalar>(checkpoints: &[TransformerParams<T>]) -> Result<TransformerParams<T>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no checkpoints to average".into()))?;
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.config != first.config || c.data.len() != first.data.len() {
            return Err(Error::ShapeMismatch(format!("checkpoint {i} differs from checkpoint 0")));
        }
    }
    // Accumulate in f64 so the mean does not depend on checkpoint order.
    let mut acc = vec![0.0f64; first.data.len()];
    for c in checkpoints {
        for (a, x) in acc.iter_mut().zip(&c.data) {
            *a += x.to_f64().unwrap_or(f64::NAN);
        }
    }
    let k = checkpoints.len() as f64;
    Ok(TransformerParams {
        config: first.config.clone(),
        layout: first.layout.clone(),
        data: acc.into_iter().map(|a| T::c(a / k)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            vocab_size: 11,
            max_positions: 32,
            tied_embeddings: true,
        }
    }

    #[test]
    fn layout_names_and_sizes() {
        let cfg = tiny();
        let layout = Layout::new(&cfg);
        assert_eq!(layout.spec("embed").unwrap().shape, [11, 8]);
        assert!(layout.spec("output.weight").is_none());
        assert_eq!(layout.spec("dec.0.cross_attn.k.weight").unwrap().shape, [8, 8]);
        assert_eq!(layout.spec("enc.0.ffn.in.weight").unwrap().shape, [16, 8]);
        let sum: usize = layout.specs.iter().map(TensorSpec::len).sum();
        assert_eq!(sum, layout.total);
        let untied = Layout::new(&ModelConfig { tied_embeddings: false, ..cfg });
        assert_eq!(untied.total, layout.total + 88);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig::desk(100).validate().is_ok());
        assert!(ModelConfig::full(100).validate().is_ok());
    }

    #[test]
    fn averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = TransformerParams::<f32>::init(&tiny(), &mut rng).unwrap();
        let avg = average_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(avg, a);

        let mut lo = TransformerParams::<f32>::zeros(&tiny()).unwrap();
        let mut hi = lo.clone();
        lo.tensor_mut("output.bias").unwrap()[0] = 0.0;
        hi.tensor_mut("output.bias").unwrap()[0] = 2.0;
        let mid = average_checkpoints(&[lo.clone(), hi.clone()]).unwrap();
        assert_eq!(mid.tensor("output.bias").unwrap()[0], 1.0);

        let b = TransformerParams::<f32>::init(&tiny(), &mut rng).unwrap();
        let c = TransformerParams::<f32>::init(&tiny(), &mut rng).unwrap();
        let x = average_checkpoints(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = average_checkpoints(&[c, a, b]).unwrap();
        assert_eq!(x, y);

        let other = TransformerParams::<f32>::zeros(&ModelConfig { d_ff: 4, ..tiny() }).unwrap();
        assert!(average_checkpoints(&[lo, other]).is_err());
        assert!(average_checkpoints::<f32>(&[]).is_err());
    }
}
