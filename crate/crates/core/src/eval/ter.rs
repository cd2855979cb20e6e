use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TerConfig {
    pub lowercase: bool,
    /// Longest block that may be shifted, in words.
    pub max_shift_size: usize,
    /// Upper bound on the number of shifts applied per sentence.
    pub max_shifts: usize,
    /// Farthest a block may travel, in words.
    pub max_shift_distance: usize,
}

impl Default for TerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            max_shift_size: 10,
            max_shifts: 10,
            max_shift_distance: 50,
        }
    }
}

/// Edit count of one sentence and the reference length it is normalized by.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TerStats {
    pub edits: usize,
    pub ref_len: usize,
}

impl TerStats {
    pub fn score(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        100.0 * self.edits as f64 / self.ref_len as f64
    }
}

impl std::ops::AddAssign for TerStats {
    fn add_assign(&mut self, rhs: Self) {
        self.edits += rhs.edits;
        self.ref_len += rhs.ref_len;
    }
}

fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

fn occurs_in(phrase: &[&str], reference: &[&str]) -> bool {
    reference.windows(phrase.len()).any(|w| w == phrase)
}

/// `words` with the block `[start, start+len)` moved so that it begins at
/// index `dest` of the result.
fn shifted<'a>(words: &[&'a str], start: usize, len: usize, dest: usize) -> Vec<&'a str> {
    let mut rest: Vec<&str> = Vec::with_capacity(words.len());
    rest.extend_from_slice(&words[..start]);
    rest.extend_from_slice(&words[start + len..]);
    let mut out = Vec::with_capacity(words.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&words[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Word-level edits with greedy block shifts on the hypothesis: repeatedly
/// take the single shift that lowers the edit distance the most, each shift
/// costing one edit.
pub fn ter_stats(hypothesis: &str, reference: &str, cfg: &TerConfig) -> Result<TerStats> {
    let (hyp, reference) = if cfg.lowercase {
        (hypothesis.to_lowercase(), reference.to_lowercase())
    } else {
        (hypothesis.to_string(), reference.to_string())
    };
    let reference: Vec<&str> = reference.split_whitespace().collect();
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut hyp: Vec<&str> = hyp.split_whitespace().collect();
    let mut distance = levenshtein(&hyp, &reference);
    let mut shifts = 0;
    while shifts < cfg.max_shifts && distance > 0 {
        let mut best: Option<(usize, Vec<&str>)> = None;
        for start in 0..hyp.len() {
            for len in (1..=cfg.max_shift_size.min(hyp.len() - start)).rev() {
                if !occurs_in(&hyp[start..start + len], &reference) {
                    continue;
                }
                let slots = hyp.len() - len;
                let lo = start.saturating_sub(cfg.max_shift_distance);
                let hi = (start + cfg.max_shift_distance).min(slots);
                for dest in lo..=hi {
                    if dest == start {
                        continue;
                    }
                    let candidate = shifted(&hyp, start, len, dest);
                    let d = levenshtein(&candidate, &reference);
                    if d < distance && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, candidate));
                    }
                }
            }
        }
        let Some((d, candidate)) = best else { break };
        hyp = candidate;
        distance = d;
        shifts += 1;
    }
    Ok(TerStats {
        edits: distance + shifts,
        ref_len: reference.len(),
    })
}

/// Sentence TER in percent, normalized by the reference length.
pub fn ter(hypothesis: &str, reference: &str) -> Result<f64> {
    Ok(ter_stats(hypothesis, reference, &TerConfig::default())?.score())
}

/// Corpus TER: total edits over total reference words.
pub fn corpus_ter<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    cfg: &TerConfig,
) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Metric(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = TerStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total += ter_stats(h.as_ref(), r.as_ref(), cfg)?;
    }
    Ok(total.score())
}
