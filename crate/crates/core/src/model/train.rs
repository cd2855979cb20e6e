use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::smoothed_cross_entropy;
use super::optim::Adam;
use super::params::{average_checkpoints, ModelConfig, TransformerParams};
use super::schedule::noam_lr;
use super::transformer::{backward_batch, forward_batch, Batch};
use crate::protocol::EncodedExample;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub label_smoothing: f64,
    /// Padded tokens per batch (the longer side counts).
    pub tokens_per_batch: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub keep_last: usize,
    pub rng_seed: u64,
    /// Multiplier on the Noam learning rate.
    pub lr_scale: f64,
    pub log_every: usize,
    /// Where checkpoints are written; kept in memory only when absent.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            label_smoothing: 0.1,
            tokens_per_batch: 4096,
            total_steps: 10_000,
            checkpoint_every: 1000,
            keep_last: 10,
            rng_seed: 0,
            lr_scale: 1.0,
            log_every: 100,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.tokens_per_batch == 0 || self.total_steps == 0 || self.checkpoint_every == 0 || self.keep_last == 0 {
            return Err(Error::Config(
                "tokens_per_batch, total_steps, checkpoint_every and keep_last must be positive".into(),
            ));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::Config("lr_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    /// Token-weighted mean loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    pub elapsed_secs: f64,
}

pub struct TrainOutcome {
    /// Mean of the retained checkpoints.
    pub averaged: TransformerParams<f32>,
    pub last: TransformerParams<f32>,
    /// `(step, params)` of the retained checkpoints, oldest first.
    pub checkpoints: Vec<(usize, TransformerParams<f32>)>,
    pub log: Vec<TrainLogRecord>,
}

/// Groups examples of similar length so that each batch holds at most
/// `tokens_per_batch` padded tokens (or one over-long example). Batch
/// order is shuffled.
pub fn make_batches<R: rand::Rng>(data: &[EncodedExample], tokens_per_batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let len = |i: usize| data[i].source_ids.len().max(data[i].target_ids.len() + 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| len(i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for i in order {
        let m = cur_max.max(len(i));
        if !cur.is_empty() && m * (cur.len() + 1) > tokens_per_batch {
            batches.push(std::mem::take(&mut cur));
            cur_max = len(i);
        } else {
            cur_max = m;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

/// Trains from `init` (or a fresh initialization) and returns the averaged
/// last checkpoints. `on_log` sees every log record as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[EncodedExample],
    init: Option<TransformerParams<f32>>,
    on_log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = match init {
        Some(p) if p.config == *model_cfg => p,
        Some(p) => {
            return Err(Error::ShapeMismatch(format!(
                "initial parameters have config {:?}, expected {:?}",
                p.config, model_cfg
            )))
        }
        None => TransformerParams::init(model_cfg, &mut rng)?,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut adam = Adam::new(params.num_params());
    let mut kept: VecDeque<(usize, TransformerParams<f32>)> = VecDeque::new();
    let mut log = Vec::new();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let start = Instant::now();
    let (mut window_loss, mut window_tokens, mut window_start) = (0.0, 0usize, Instant::now());

    for step in 1..=cfg.total_steps {
        if queue.is_empty() {
            queue = make_batches(data, cfg.tokens_per_batch, &mut rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("non-empty queue");
        let examples: Vec<&EncodedExample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_examples(&examples);
        let cache = forward_batch(&params, &batch, Some(&mut rng))?;
        let (loss, dlogits) =
            smoothed_cross_entropy(&cache.log_probs, &batch.tgt_out, model_cfg.vocab_size, cfg.label_smoothing)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = backward_batch(&params, &batch, &cache, &dlogits);
        drop(cache);
        let lr = cfg.lr_scale * noam_lr(step, model_cfg.d_model, cfg.warmup_steps)?;
        adam.step(&mut params.data, &grads, lr);

        let ntok = batch.target_tokens();
        window_loss += loss * ntok as f64;
        window_tokens += ntok;
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            let secs = window_start.elapsed().as_secs_f64();
            let rec = TrainLogRecord {
                step,
                loss: window_loss / window_tokens.max(1) as f64,
                lr,
                tokens_per_sec: window_tokens as f64 / secs.max(1e-9),
                elapsed_secs: start.elapsed().as_secs_f64(),
            };
            on_log(&rec);
            log.push(rec);
            (window_loss, window_tokens, window_start) = (0.0, 0, Instant::now());
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
            params.check_finite()?;
            if let Some(dir) = &cfg.checkpoint_dir {
                params.save(&dir.join(format!("checkpoint_{step:07}.bin")))?;
            }
            kept.push_back((step, params.clone()));
            if kept.len() > cfg.keep_last {
                let (old, _) = kept.pop_front().expect("non-empty");
                if let Some(dir) = &cfg.checkpoint_dir {
                    let _ = std::fs::remove_file(dir.join(format!("checkpoint_{old:07}.bin")));
                }
            }
        }
    }
    let checkpoints: Vec<_> = kept.into_iter().collect();
    let snapshots: Vec<TransformerParams<f32>> = checkpoints.iter().map(|(_, p)| p.clone()).collect();
    let averaged = average_checkpoints(&snapshots)?;
    Ok(TrainOutcome { averaged, last: params, checkpoints, log })
}
