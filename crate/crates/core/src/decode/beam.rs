use serde::{Deserialize, Serialize};

use super::infer::{DecoderCache, EncoderOutput, InferenceModel};
use crate::subword::{BpeModel, Special, BOS, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of target tokens, EOS included.
    pub max_len: usize,
    /// Finished hypotheses are ranked by `score / len^alpha`.
    pub length_norm_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 3, max_len: 128, length_norm_alpha: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated tokens; ends with EOS iff `finished`.
    pub token_ids: Vec<u32>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        self.score / (self.token_ids.len().max(1) as f64).powf(alpha)
    }

    /// Tokens without the trailing EOS.
    pub fn output_ids(&self) -> &[u32] {
        match self.token_ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.token_ids,
        }
    }
}

/// Which tokens decoding may emit.
#[derive(Debug, Clone)]
pub struct OutputFilter {
    banned: Vec<bool>,
}

impl OutputFilter {
    /// Any token except PAD and BOS.
    pub fn any(vocab_size: usize) -> Self {
        let mut banned = vec![false; vocab_size];
        for id in [Special::Pad.id(), BOS] {
            banned[id as usize] = true;
        }
        Self { banned }
    }

    /// Ordinary text: every reserved token is banned except EOS.
    pub fn text(bpe: &BpeModel) -> Self {
        Self::reserved_except(bpe, &[EOS])
    }

    /// Gap fillers; the separator is allowed only with several gaps.
    pub fn fillers(bpe: &BpeModel, gaps: usize) -> Self {
        if gaps > 1 {
            Self::reserved_except(bpe, &[EOS, Special::Sep.id()])
        } else {
            Self::text(bpe)
        }
    }

    fn reserved_except(bpe: &BpeModel, allowed: &[u32]) -> Self {
        let mut banned = vec![false; bpe.vocab_size()];
        for id in 0..bpe.num_reserved() {
            banned[id as usize] = !allowed.contains(&id);
        }
        Self { banned }
    }

    pub fn allows(&self, id: u32) -> bool {
        !self.banned.get(id as usize).copied().unwrap_or(true)
    }
}

struct Live {
    hyp: BeamHypothesis,
    cache: DecoderCache,
}

fn rank(mut finished: Vec<BeamHypothesis>, mut unfinished: Vec<BeamHypothesis>, cfg: &BeamConfig, n: usize) -> Vec<BeamHypothesis> {
    let key = |h: &BeamHypothesis| h.normalized_score(cfg.length_norm_alpha);
    finished.sort_by(|a, b| key(b).total_cmp(&key(a)));
    unfinished.sort_by(|a, b| key(b).total_cmp(&key(a)));
    finished.extend(unfinished);
    finished.truncate(n);
    finished
}

/// Beam search continuing after `prefix`, whose tokens are forced (their
/// log-probabilities count towards the score but never prune).
pub fn beam_search_with_prefix(
    model: &InferenceModel,
    source_ids: &[u32],
    prefix: &[u32],
    cfg: &BeamConfig,
    filter: &OutputFilter,
) -> Result<Vec<BeamHypothesis>> {
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam_size must be >= 1".into()));
    }
    let max_len = cfg.max_len.min(model.config.max_positions.saturating_sub(1));
    if prefix.len() > max_len {
        return Err(Error::PrefixTooLong { len: prefix.len(), max: max_len });
    }
    let enc = model.encode(source_ids)?;
    let mut cache = [model.new_cache()];
    let mut score = 0.0;
    let mut input = BOS;
    for &t in prefix {
        let lp = model.step(&enc, &mut cache, &[input])?;
        score += lp[t as usize] as f64;
        input = t;
    }
    let [cache] = cache;
    let live = vec![Live { hyp: BeamHypothesis { token_ids: prefix.to_vec(), score, finished: false }, cache }];
    search(model, &enc, live, input, cfg, max_len, filter)
}

fn search(
    model: &InferenceModel,
    enc: &EncoderOutput,
    mut live: Vec<Live>,
    first_input: u32,
    cfg: &BeamConfig,
    max_len: usize,
    filter: &OutputFilter,
) -> Result<Vec<BeamHypothesis>> {
    let beam = cfg.beam_size;
    let v = model.config.vocab_size;
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut inputs = vec![first_input];
    while !live.is_empty() && finished.len() < beam && live[0].hyp.token_ids.len() < max_len {
        let mut caches: Vec<DecoderCache> = live.iter_mut().map(|l| std::mem::replace(&mut l.cache, model.new_cache())).collect();
        let lp = model.step(enc, &mut caches, &inputs)?;
        for (l, c) in live.iter_mut().zip(caches) {
            l.cache = c;
        }
        // Best `beam` continuations of each live hypothesis suffice to fill
        // the next beam.
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * beam);
        for (i, l) in live.iter().enumerate() {
            let row = &lp[i * v..(i + 1) * v];
            let mut top: Vec<(f32, u32)> = Vec::with_capacity(beam + 1);
            for (tok, &p) in row.iter().enumerate() {
                if !filter.allows(tok as u32) || (top.len() == beam && p <= top[beam - 1].0) {
                    continue;
                }
                let pos = top.partition_point(|&(q, _)| q >= p);
                top.insert(pos, (p, tok as u32));
                top.truncate(beam);
            }
            cands.extend(top.into_iter().map(|(p, tok)| (l.hyp.score + p as f64, i, tok)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next: Vec<Live> = Vec::with_capacity(beam);
        for (r, &(score, i, tok)) in cands.iter().enumerate() {
            let mut token_ids = live[i].hyp.token_ids.clone();
            token_ids.push(tok);
            if tok == EOS {
                if r < beam {
                    finished.push(BeamHypothesis { token_ids, score, finished: true });
                }
            } else if next.len() < beam {
                next.push(Live { hyp: BeamHypothesis { token_ids, score, finished: false }, cache: live[i].cache.clone() });
            }
            if next.len() == beam && r + 1 >= beam {
                break;
            }
        }
        inputs = next.iter().map(|l| *l.hyp.token_ids.last().expect("non-empty")).collect();
        live = next;
    }
    let unfinished = live.into_iter().map(|l| l.hyp).collect();
    Ok(rank(finished, unfinished, cfg, beam))
}

/// Up to `beam_size` hypotheses, best first: finished ones by normalized
/// score, then any cut off at `max_len`.
pub fn beam_search(
    model: &InferenceModel,
    source_ids: &[u32],
    cfg: &BeamConfig,
    filter: &OutputFilter,
) -> Result<Vec<BeamHypothesis>> {
    beam_search_with_prefix(model, source_ids, &[], cfg, filter)
}

/// Argmax decoding, written independently of the beam search.
pub fn greedy_decode(model: &InferenceModel, source_ids: &[u32], max_len: usize, filter: &OutputFilter) -> Result<BeamHypothesis> {
    let max_len = max_len.min(model.config.max_positions.saturating_sub(1));
    let enc = model.encode(source_ids)?;
    let mut cache = [model.new_cache()];
    let mut hyp = BeamHypothesis { token_ids: Vec::new(), score: 0.0, finished: false };
    let mut input = BOS;
    while hyp.token_ids.len() < max_len {
        let lp = model.step(&enc, &mut cache, &[input])?;
        let (tok, p) = lp
            .iter()
            .enumerate()
            .filter(|&(t, _)| filter.allows(t as u32))
            .fold((0usize, f32::NEG_INFINITY), |best, (t, &p)| if p > best.1 { (t, p) } else { best });
        hyp.score += p as f64;
        hyp.token_ids.push(tok as u32);
        input = tok as u32;
        if input == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    /// Full target tokens (forced prefix included, EOS excluded).
    pub token_ids: Vec<u32>,
    pub text: String,
    pub score: f64,
    pub finished: bool,
}

/// The `k` best distinct completions of a forced target prefix; distinct
/// means different detokenized strings.
pub fn prefix_constrained_decode(
    model: &InferenceModel,
    bpe: &BpeModel,
    source_ids: &[u32],
    forced_prefix: &[u32],
    k: usize,
    cfg: &BeamConfig,
) -> Result<Vec<Alternative>> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let cfg = BeamConfig { beam_size: cfg.beam_size.max(k), ..*cfg };
    let hyps = beam_search_with_prefix(model, source_ids, forced_prefix, &cfg, &OutputFilter::text(bpe))?;
    let mut out: Vec<Alternative> = Vec::with_capacity(k);
    for h in hyps {
        let text = bpe.decode(h.output_ids())?;
        if out.iter().any(|a| a.text == text) {
            continue;
        }
        out.push(Alternative {
            token_ids: h.output_ids().to_vec(),
            text,
            score: h.normalized_score(cfg.length_norm_alpha),
            finished: h.finished,
        });
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// n-best fillers for the gaps of a BTI source (`x <lang> y_g`).
pub fn infill_gaps(
    model: &InferenceModel,
    bpe: &BpeModel,
    bti_source_ids: &[u32],
    n: usize,
    cfg: &BeamConfig,
) -> Result<Vec<BeamHypothesis>> {
    let gaps = bti_source_ids.iter().filter(|&&t| t == Special::Gap.id()).count();
    if gaps == 0 {
        return Err(Error::NoGap);
    }
    let cfg = BeamConfig { beam_size: n, ..*cfg };
    beam_search(model, bti_source_ids, &cfg, &OutputFilter::fillers(bpe, gaps))
}
