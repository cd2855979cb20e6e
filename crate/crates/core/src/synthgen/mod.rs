//! Synthetic triplets for the update and infilling tasks, built from plain
//! parallel pairs.
//!
//! * INS: drop a segment from `y'`; the model must re-insert it.
//! * DEL: extend `y'` with a filler proposed by a fill-in-gaps oracle.
//! * SUB: replace a segment of `y'` with the best oracle alternative.
//! * BTI: mask a segment of `y'`; the target is the masked text.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelPair;
use crate::decode::{infill_gaps, BeamConfig, InferenceModel};
use crate::protocol::{encode_bti, gap_words, TaskKind, Triplet};
use crate::subword::BpeModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub trn: f64,
    pub ins: f64,
    pub del: f64,
    pub sub: f64,
    pub bti: f64,
}

impl TaskMix {
    pub fn uniform() -> Self {
        Self { trn: 1.0, ins: 1.0, del: 1.0, sub: 1.0, bti: 1.0 }
    }

    /// Translation only.
    pub fn trn_only() -> Self {
        Self { trn: 1.0, ins: 0.0, del: 0.0, sub: 0.0, bti: 0.0 }
    }

    /// Balanced translation and infilling, as used for the oracle.
    pub fn oracle() -> Self {
        Self { trn: 1.0, ins: 0.0, del: 0.0, sub: 0.0, bti: 1.0 }
    }

    pub fn weight(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Trn => self.trn,
            TaskKind::Ins => self.ins,
            TaskKind::Del => self.del,
            TaskKind::Sub => self.sub,
            TaskKind::Bti => self.bti,
        }
    }

    fn total(&self) -> f64 {
        TaskKind::ALL.iter().map(|&t| self.weight(t)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskKind {
        let mut u = rng.gen::<f64>() * self.total();
        for t in TaskKind::ALL {
            let w = self.weight(t);
            if u < w {
                return t;
            }
            u -= w;
        }
        *TaskKind::ALL.iter().rev().find(|&&t| self.weight(t) > 0.0).expect("positive total weight")
    }
}

impl Default for TaskMix {
    fn default() -> Self {
        Self::uniform()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub max_segment_len: usize,
    pub max_removed_ratio: f64,
    pub nbest_for_sub: usize,
    pub rng_seed: u64,
    pub task_mix: TaskMix,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_segment_len: 5,
            max_removed_ratio: 0.5,
            nbest_for_sub: 5,
            rng_seed: 0,
            task_mix: TaskMix::uniform(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_segment_len == 0 {
            return Err(Error::Config("max_segment_len must be >= 1".into()));
        }
        if !(self.max_removed_ratio > 0.0 && self.max_removed_ratio <= 1.0) {
            return Err(Error::Config("max_removed_ratio must lie in (0, 1]".into()));
        }
        if self.nbest_for_sub < 2 {
            return Err(Error::Config("nbest_for_sub must be >= 2".into()));
        }
        let weights = TaskKind::ALL.map(|t| self.task_mix.weight(t));
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.task_mix.total() <= 0.0 {
            return Err(Error::Config("task_mix weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    /// Longest segment that may be dropped or replaced in an `n`-word
    /// sentence.
    pub fn max_update_span(&self, n: usize) -> usize {
        self.max_segment_len.min((self.max_removed_ratio * n as f64).floor() as usize)
    }
}

/// Why a pair produced no triplet; the caller moves on to another pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skip {
    TooShort,
    EmptyFiller,
    NoDistinctFiller,
}

/// Proposes fillers for `<gap>` markers; the oracle behind DEL and SUB.
pub trait GapFiller {
    /// Up to `n` fillers for the single gap of `y_gapped`, best first.
    fn fill(&self, x: &str, y_gapped: &str, tgt_lang: &str, n: usize) -> Result<Vec<String>>;
}

impl<F> GapFiller for F
where
    F: Fn(&str, &str, &str, usize) -> Vec<String>,
{
    fn fill(&self, x: &str, y_gapped: &str, tgt_lang: &str, n: usize) -> Result<Vec<String>> {
        Ok(self(x, y_gapped, tgt_lang, n))
    }
}

/// A trained TRN+BTI model used as fill-in-gaps oracle.
pub struct ModelGapFiller<'a> {
    pub model: &'a InferenceModel,
    pub bpe: &'a BpeModel,
    pub beam: BeamConfig,
}

impl GapFiller for ModelGapFiller<'_> {
    fn fill(&self, x: &str, y_gapped: &str, tgt_lang: &str, n: usize) -> Result<Vec<String>> {
        let ex = encode_bti(self.bpe, x, y_gapped, tgt_lang, None)?;
        infill_gaps(self.model, self.bpe, &ex.source_ids, n, &self.beam)?
            .iter()
            .filter(|h| h.finished)
            .map(|h| self.bpe.decode(h.output_ids()))
            .collect()
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn splice(words: &[&str], start: usize, end: usize, insert: &str) -> String {
    let mut out: Vec<&str> = words[..start].to_vec();
    out.extend(insert.split_whitespace());
    out.extend_from_slice(&words[end..]);
    out.join(" ")
}

fn triplet(pair: &ParallelPair, task: TaskKind, y: Option<String>, gap: Option<[usize; 2]>) -> Triplet {
    Triplet {
        task,
        x_prime: pair.source.clone(),
        y,
        y_prime: pair.target.clone(),
        src_lang: pair.src_lang.clone(),
        tgt_lang: pair.tgt_lang.clone(),
        gap,
    }
}

/// Random `[start, end)` with length uniform in `[1, max_len]`.
fn segment<R: Rng + ?Sized>(n: usize, max_len: usize, rng: &mut R) -> Option<[usize; 2]> {
    if max_len == 0 || n == 0 {
        return None;
    }
    let len = rng.gen_range(1..=max_len.min(n));
    let start = rng.gen_range(0..=n - len);
    Some([start, start + len])
}

pub fn make_translation(pair: &ParallelPair) -> Triplet {
    triplet(pair, TaskKind::Trn, None, None)
}

/// INS: `y` is `y'` with one segment dropped.
pub fn make_insertion<R: Rng + ?Sized>(pair: &ParallelPair, cfg: &SynthConfig, rng: &mut R) -> Result<Triplet, Skip> {
    let w = words(&pair.target);
    let [s, e] = segment(w.len(), cfg.max_update_span(w.len()), rng).ok_or(Skip::TooShort)?;
    Ok(triplet(pair, TaskKind::Ins, Some(splice(&w, s, e, "")), None))
}

/// DEL: `y` is `y'` with an oracle filler inserted at a random position.
pub fn make_deletion<R: Rng + ?Sized>(
    pair: &ParallelPair,
    oracle: &dyn GapFiller,
    rng: &mut R,
) -> Result<Result<Triplet, Skip>> {
    let w = words(&pair.target);
    if w.is_empty() {
        return Ok(Err(Skip::TooShort));
    }
    let pos = rng.gen_range(0..=w.len());
    let fillers = oracle.fill(&pair.source, &gap_words(&w, pos, pos), &pair.tgt_lang, 1)?;
    let Some(filler) = fillers.into_iter().find(|f| !f.trim().is_empty()) else {
        return Ok(Err(Skip::EmptyFiller));
    };
    Ok(Ok(triplet(pair, TaskKind::Del, Some(splice(&w, pos, pos, &filler)), None)))
}

/// SUB: one segment of `y'` replaced by the best oracle filler that differs
/// from it.
pub fn make_substitution<R: Rng + ?Sized>(
    pair: &ParallelPair,
    oracle: &dyn GapFiller,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Result<Triplet, Skip>> {
    let w = words(&pair.target);
    let Some([s, e]) = segment(w.len(), cfg.max_update_span(w.len()), rng) else {
        return Ok(Err(Skip::TooShort));
    };
    let masked = w[s..e].join(" ");
    let fillers = oracle.fill(&pair.source, &gap_words(&w, s, e), &pair.tgt_lang, cfg.nbest_for_sub)?;
    let pick = fillers.iter().find(|f| {
        let f = words(f).join(" ");
        !f.is_empty() && f != masked
    });
    Ok(match pick {
        Some(f) => Ok(triplet(pair, TaskKind::Sub, Some(splice(&w, s, e, f)), None)),
        None => Err(Skip::NoDistinctFiller),
    })
}

/// BTI: one segment of `y'` (length uniform in `[1, max_segment_len]`)
/// masked; the gold filler is the masked text.
pub fn make_bti<R: Rng + ?Sized>(pair: &ParallelPair, cfg: &SynthConfig, rng: &mut R) -> Result<Triplet, Skip> {
    let n = words(&pair.target).len();
    let gap = segment(n, cfg.max_segment_len, rng).ok_or(Skip::TooShort)?;
    Ok(triplet(pair, TaskKind::Bti, None, Some(gap)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub pairs_seen: usize,
    pub emitted: BTreeMap<TaskKind, usize>,
    pub skips: BTreeMap<TaskKind, BTreeMap<Skip, usize>>,
    /// Histogram of edited/masked span lengths (in words) per task.
    pub span_lengths: BTreeMap<TaskKind, BTreeMap<usize, usize>>,
}

impl SynthStats {
    pub fn total_emitted(&self) -> usize {
        self.emitted.values().sum()
    }

    pub fn total_skips(&self) -> usize {
        self.skips.values().flat_map(|m| m.values()).sum()
    }

    fn record(&mut self, t: &Triplet) {
        *self.emitted.entry(t.task).or_default() += 1;
        let span = match (t.task, &t.y, t.gap) {
            (TaskKind::Bti, _, Some([s, e])) => Some(e - s),
            (TaskKind::Trn, ..) => None,
            (_, Some(y), _) => Some(words(y).len().abs_diff(words(&t.y_prime).len())),
            _ => None,
        };
        if let Some(len) = span {
            *self.span_lengths.entry(t.task).or_default().entry(len).or_default() += 1;
        }
    }
}

/// One triplet per input pair with tasks drawn from `cfg.task_mix`. When a
/// pair cannot serve the drawn task the task carries over to the next pair,
/// so skips do not bias the mix.
pub fn generate_dataset<R: Rng + ?Sized>(
    pairs: &[ParallelPair],
    oracle: Option<&dyn GapFiller>,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Vec<Triplet>, SynthStats)> {
    cfg.validate()?;
    if oracle.is_none() && (cfg.task_mix.del > 0.0 || cfg.task_mix.sub > 0.0) {
        return Err(Error::Config("DEL and SUB generation needs a fill-in-gaps oracle".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut stats = SynthStats::default();
    let mut pending: Option<TaskKind> = None;
    for pair in pairs {
        stats.pairs_seen += 1;
        let task = pending.take().unwrap_or_else(|| cfg.task_mix.sample(rng));
        let made = match task {
            TaskKind::Trn => Ok(make_translation(pair)),
            TaskKind::Ins => make_insertion(pair, cfg, rng),
            TaskKind::Bti => make_bti(pair, cfg, rng),
            TaskKind::Del => make_deletion(pair, oracle.expect("checked above"), rng)?,
            TaskKind::Sub => make_substitution(pair, oracle.expect("checked above"), cfg, rng)?,
        };
        match made {
            Ok(t) => {
                stats.record(&t);
                out.push(t);
            }
            Err(skip) => {
                *stats.skips.entry(task).or_default().entry(skip).or_default() += 1;
                pending = Some(task);
            }
        }
    }
    Ok((out, stats))
}

/// Checks the span relation between `y` and `y'` that each update task
/// guarantees. Returns a description of the first violation.
pub fn check_span_property(t: &Triplet, cfg: &SynthConfig) -> std::result::Result<(), String> {
    let yp = words(&t.y_prime);
    let y = match (&t.y, t.task) {
        (Some(y), TaskKind::Ins | TaskKind::Del | TaskKind::Sub) => words(y),
        (None, TaskKind::Trn | TaskKind::Bti) => return Ok(()),
        _ => return Err(format!("{} triplet with wrong initial target presence", t.task)),
    };
    // One contiguous removal turns `long` into `short`.
    let one_cut = |long: &[&str], short: &[&str]| -> bool {
        let k = long.len() - short.len();
        (0..=short.len()).any(|s| long[..s] == short[..s] && long[s + k..] == short[s..])
    };
    match t.task {
        TaskKind::Ins => {
            let k = yp.len().checked_sub(y.len()).unwrap_or(0);
            if k == 0 || k > cfg.max_update_span(yp.len()) {
                return Err(format!("INS removed {k} words from {}", yp.len()));
            }
            if !one_cut(&yp, &y) {
                return Err("INS y is not y' minus one segment".into());
            }
        }
        TaskKind::Del => {
            if y.len() <= yp.len() || !one_cut(&y, &yp) {
                return Err("DEL y' is not y minus one segment".into());
            }
        }
        TaskKind::Sub => {
            if y == yp {
                return Err("SUB left the target unchanged".into());
            }
            let p = y.iter().zip(&yp).take_while(|(a, b)| a == b).count();
            let max_q = y.len().min(yp.len()) - p;
            let q = y.iter().rev().zip(yp.iter().rev()).take(max_q).take_while(|(a, b)| a == b).count();
            let changed = yp.len() - p - q;
            if changed > cfg.max_update_span(yp.len()) {
                return Err(format!("SUB changed {changed} words of {}", yp.len()));
            }
        }
        _ => {}
    }
    Ok(())
}
