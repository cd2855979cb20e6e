//! Finite-difference verification of the analytic backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::smoothed_cross_entropy;
use super::params::{ModelConfig, TransformerParams};
use super::transformer::{backward_batch, forward_batch, Batch};
use crate::protocol::{EncodedExample, TaskKind};
use crate::Result;

const ZERO_GRAD: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TensorGradError {
    pub name: String,
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)`; absolute
    /// difference when both norms vanish (e.g. attention key biases, which
    /// softmax is invariant to).
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorGradError>,
    pub num_params: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }
}

/// The micro-model used for gradient checks: d=16, two layers.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        dropout: 0.1,
        vocab_size: 23,
        max_positions: 16,
        tied_embeddings: true,
    }
}

fn micro_batch() -> Batch {
    let a = EncodedExample { source_ids: vec![12, 13, 14, 15, 9], target_ids: vec![16, 17, 18], task: TaskKind::Trn };
    let b = EncodedExample { source_ids: vec![19, 20, 9], target_ids: vec![21, 22, 12, 13], task: TaskKind::Trn };
    Batch::from_examples(&[&a, &b])
}

/// Compares analytic gradients with central differences on every parameter
/// of a float64 model. Dropout masks are reproduced exactly by reseeding.
pub fn gradient_check(cfg: &ModelConfig, label_smoothing: f64, seed: u64) -> Result<GradCheckReport> {
    let mut params = TransformerParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let batch = micro_batch();
    let loss_at = |p: &TransformerParams<f64>| -> Result<(f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let cache = forward_batch(p, &batch, Some(&mut rng))?;
        let (loss, dlogits) = smoothed_cross_entropy(&cache.log_probs, &batch.tgt_out, cfg.vocab_size, label_smoothing)?;
        Ok((loss, backward_batch(p, &batch, &cache, &dlogits)))
    };
    let (_, analytic) = loss_at(&params)?;
    let h = 1e-6;
    let layout = params.layout.clone();
    let mut tensors = Vec::with_capacity(layout.specs.len());
    for spec in &layout.specs {
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for i in spec.offset..spec.offset + spec.len() {
            let orig = params.data[i];
            params.data[i] = orig + h;
            let (plus, _) = loss_at(&params)?;
            params.data[i] = orig - h;
            let (minus, _) = loss_at(&params)?;
            params.data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += numeric.powi(2);
        }
        let scale = norm_a.sqrt() + norm_n.sqrt();
        let rel_error = if scale > ZERO_GRAD { diff.sqrt() / scale } else { diff.sqrt() };
        tensors.push(TensorGradError { name: spec.name.clone(), rel_error });
    }
    Ok(GradCheckReport { tensors, num_params: params.num_params() })
}
