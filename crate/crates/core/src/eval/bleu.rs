use std::collections::HashMap;

use crate::{Error, Result};

pub const MAX_NGRAM_ORDER: usize = 4;

fn is_13a_symbol(c: char) -> bool {
    matches!(c, '{'..='~' | '['..='`' | ' '..='&' | '('..='+' | ':'..='@' | '/')
}

/// mteval-v13a style tokenization: split off most punctuation; periods and
/// commas stay attached only between digits; dashes are split after digits.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let line = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">");
    let chars: Vec<char> = line.chars().collect();
    let mut out = String::with_capacity(line.len() * 2);
    for (i, &c) in chars.iter().enumerate() {
        let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
        let next_digit = chars.get(i + 1).is_some_and(char::is_ascii_digit);
        let split = if is_13a_symbol(c) && c != ' ' {
            true
        } else if c == '.' || c == ',' {
            !(prev_digit && next_digit)
        } else {
            c == '-' && prev_digit
        };
        if split {
            out.push(' ');
            out.push(c);
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    counts
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_NGRAM_ORDER],
    pub totals: [usize; MAX_NGRAM_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_sentence(&mut self, hypothesis: &str, reference: &str) {
        let hyp = tokenize_13a(hypothesis);
        let reference = tokenize_13a(reference);
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_NGRAM_ORDER {
            let h = ngram_counts(&hyp, n);
            let r = ngram_counts(&reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// BLEU in [0, 100] with exponential smoothing of zero-match orders.
    pub fn score(&self) -> f64 {
        // No unigram match at all: undefined, reported as 0 rather than a
        // smoothed positive value.
        if self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut smooth = 1.0;
        for n in 0..MAX_NGRAM_ORDER {
            if self.totals[n] == 0 {
                return 0.0;
            }
            let p = if self.matches[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.totals[n] as f64)
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * (log_sum / MAX_NGRAM_ORDER as f64).exp()
    }
}

/// Corpus-level BLEU over aligned hypothesis/reference lists.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Metric("no sentence pairs".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        if r.as_ref().trim().is_empty() {
            return Err(Error::EmptyReference);
        }
        stats.add_sentence(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}
