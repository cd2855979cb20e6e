//! Parallel corpora: the deterministic toy language pair, length/ratio
//! filtering, punctuation normalization and casing perturbation.

mod normalize;
mod toy;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use normalize::{normalize_punctuation, PUNCTUATION_TABLE};
pub use toy::{
    generate_toy_corpus, generate_toy_corpus_with, Register, ToyConfig, ToyCorpus, ToyLexicon,
    ToyPos, TOY_SOURCE_LANG, TOY_TARGET_LANG,
};

/// The two languages a model is trained on. Either one can be the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub first: String,
    pub second: String,
}

impl LanguagePair {
    pub fn new(first: impl Into<String>, second: impl Into<String>) -> Result<Self> {
        let (first, second) = (first.into(), second.into());
        if first.is_empty() || second.is_empty() || first == second {
            return Err(Error::Config(format!(
                "language pair needs two distinct codes, got `{first}`/`{second}`"
            )));
        }
        Ok(Self { first, second })
    }

    pub fn toy() -> Self {
        Self {
            first: TOY_SOURCE_LANG.to_string(),
            second: TOY_TARGET_LANG.to_string(),
        }
    }

    pub fn contains(&self, lang: &str) -> bool {
        self.first == lang || self.second == lang
    }

    /// The other member of the pair.
    pub fn other(&self, lang: &str) -> Result<&str> {
        if lang == self.first {
            Ok(&self.second)
        } else if lang == self.second {
            Ok(&self.first)
        } else {
            Err(Error::UnknownLanguage(lang.to_string()))
        }
    }

    pub fn codes(&self) -> [&str; 2] {
        [&self.first, &self.second]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl ParallelPair {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
    ) -> Result<Self> {
        let pair = Self {
            source: source.into(),
            target: target.into(),
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.trim().is_empty() || self.target.trim().is_empty() {
            return Err(Error::format("parallel pair", "empty side"));
        }
        if self.src_lang == self.tgt_lang {
            return Err(Error::format(
                "parallel pair",
                format!("source and target language are both `{}`", self.src_lang),
            ));
        }
        Ok(())
    }

    /// The same pair seen from the other translation direction.
    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFilterConfig {
    pub max_length_ratio: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub perturb_prob: f64,
    pub rng_seed: u64,
}

impl Default for CorpusFilterConfig {
    fn default() -> Self {
        Self {
            max_length_ratio: 1.5,
            min_words: 1,
            max_words: 250,
            perturb_prob: 0.05,
            rng_seed: 0,
        }
    }
}

impl CorpusFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_length_ratio > 1.0) {
            return Err(Error::Config("max_length_ratio must be > 1".into()));
        }
        if self.min_words < 1 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if !(0.0..=1.0).contains(&self.perturb_prob) {
            return Err(Error::Config("perturb_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    LengthRatio,
    TooShort,
    TooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

impl FilterDecision {
    pub fn is_keep(self) -> bool {
        matches!(self, FilterDecision::Keep)
    }
}

/// Keep/drop decision after punctuation normalization, counting words on
/// whitespace.
pub fn filter_pair(pair: &ParallelPair, cfg: &CorpusFilterConfig) -> FilterDecision {
    let s = normalize_punctuation(&pair.source).split_whitespace().count();
    let t = normalize_punctuation(&pair.target).split_whitespace().count();
    let (short, long) = (s.min(t), s.max(t));
    if short < cfg.min_words {
        return FilterDecision::Drop(DropReason::TooShort);
    }
    if long > cfg.max_words {
        return FilterDecision::Drop(DropReason::TooLong);
    }
    if long as f64 / short as f64 > cfg.max_length_ratio {
        return FilterDecision::Drop(DropReason::LengthRatio);
    }
    FilterDecision::Keep
}

const TERMINAL_PUNCTUATION: [char; 6] = ['.', '!', '?', ';', ':', '…'];

fn lowercase_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn strip_terminal_punctuation(text: &str) -> String {
    let trimmed = text.trim_end();
    match trimmed.chars().last() {
        Some(c) if TERMINAL_PUNCTUATION.contains(&c) => {
            trimmed[..trimmed.len() - c.len_utf8()].trim_end().to_string()
        }
        _ => trimmed.to_string(),
    }
}

/// Lowercases the first character and drops one trailing terminal
/// punctuation mark, on both sides.
pub fn apply_casing_perturbation(pair: &ParallelPair) -> ParallelPair {
    let perturb = |text: &str| strip_terminal_punctuation(&lowercase_first(text));
    ParallelPair {
        source: perturb(&pair.source),
        target: perturb(&pair.target),
        src_lang: pair.src_lang.clone(),
        tgt_lang: pair.tgt_lang.clone(),
    }
}

/// One draw per pair; when it fires both sides are perturbed together.
pub fn perturb_casing<R: Rng + ?Sized>(
    pair: &ParallelPair,
    cfg: &CorpusFilterConfig,
    rng: &mut R,
) -> ParallelPair {
    if rng.gen_bool(cfg.perturb_prob) {
        apply_casing_perturbation(pair)
    } else {
        pair.clone()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessStats {
    pub seen: usize,
    pub kept: usize,
    pub dropped_ratio: usize,
    pub dropped_short: usize,
    pub dropped_long: usize,
    pub perturbed: usize,
}

/// Normalize, filter and perturb a corpus in one pass.
pub fn preprocess<R: Rng + ?Sized>(
    pairs: impl IntoIterator<Item = ParallelPair>,
    cfg: &CorpusFilterConfig,
    rng: &mut R,
) -> Result<(Vec<ParallelPair>, PreprocessStats)> {
    cfg.validate()?;
    let mut stats = PreprocessStats::default();
    let mut kept = Vec::new();
    for pair in pairs {
        stats.seen += 1;
        match filter_pair(&pair, cfg) {
            FilterDecision::Drop(DropReason::LengthRatio) => stats.dropped_ratio += 1,
            FilterDecision::Drop(DropReason::TooShort) => stats.dropped_short += 1,
            FilterDecision::Drop(DropReason::TooLong) => stats.dropped_long += 1,
            FilterDecision::Keep => {
                let normalized = ParallelPair {
                    source: normalize_punctuation(&pair.source),
                    target: normalize_punctuation(&pair.target),
                    ..pair
                };
                let out = perturb_casing(&normalized, cfg, rng);
                if out != normalized {
                    stats.perturbed += 1;
                }
                kept.push(out);
            }
        }
    }
    stats.kept = kept.len();
    Ok((kept, stats))
}

/// Reads `source TAB target` lines. Blank lines are skipped.
pub fn read_tsv(path: &Path, src_lang: &str, tgt_lang: &str) -> Result<Vec<ParallelPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (source, target) = line.split_once('\t').ok_or_else(|| {
            Error::format("corpus TSV", format!("line {} has no TAB", lineno + 1))
        })?;
        pairs.push(ParallelPair::new(source, target, src_lang, tgt_lang).map_err(|e| {
            Error::format("corpus TSV", format!("line {}: {e}", lineno + 1))
        })?);
    }
    Ok(pairs)
}

pub fn write_tsv(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        writeln!(w, "{}\t{}", p.source, p.target)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads two line-aligned files (`.src` / `.tgt`).
pub fn read_aligned(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<Vec<ParallelPair>> {
    let src = std::fs::read_to_string(src_path)?;
    let tgt = std::fs::read_to_string(tgt_path)?;
    let (src, tgt): (Vec<_>, Vec<_>) = (src.lines().collect(), tgt.lines().collect());
    if src.len() != tgt.len() {
        return Err(Error::format(
            "aligned corpus",
            format!("{} source lines vs {} target lines", src.len(), tgt.len()),
        ));
    }
    src.into_iter()
        .zip(tgt)
        .map(|(s, t)| ParallelPair::new(s, t, src_lang, tgt_lang))
        .collect()
}

pub fn write_aligned(src_path: &Path, tgt_path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut s = BufWriter::new(File::create(src_path)?);
    let mut t = BufWriter::new(File::create(tgt_path)?);
    for p in pairs {
        writeln!(s, "{}", p.source)?;
        writeln!(t, "{}", p.target)?;
    }
    s.flush()?;
    t.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    fn pair(s: &str, t: &str) -> ParallelPair {
        ParallelPair::new(s, t, "en", "fr").unwrap()
    }

    #[test]
    fn ratio_above_threshold_is_dropped() {
        let cfg = CorpusFilterConfig::default();
        assert_eq!(
            filter_pair(&pair(&words(16), &words(10)), &cfg),
            FilterDecision::Drop(DropReason::LengthRatio)
        );
        assert_eq!(filter_pair(&pair(&words(15), &words(10)), &cfg), FilterDecision::Keep);
        assert_eq!(filter_pair(&pair(&words(3), &words(3)), &cfg), FilterDecision::Keep);
    }

    #[test]
    fn length_limits() {
        let cfg = CorpusFilterConfig::default();
        assert_eq!(
            filter_pair(&pair(&words(251), &words(250)), &cfg),
            FilterDecision::Drop(DropReason::TooLong)
        );
        assert_eq!(filter_pair(&pair(&words(250), &words(250)), &cfg), FilterDecision::Keep);
        let strict = CorpusFilterConfig {
            min_words: 2,
            ..Default::default()
        };
        assert_eq!(
            filter_pair(&pair("one", "un"), &strict),
            FilterDecision::Drop(DropReason::TooShort)
        );
    }

    #[test]
    fn counting_happens_after_normalization() {
        let cfg = CorpusFilterConfig::default();
        // The spaced em-dash variants collapse to one token each.
        let p = pair("a  —  b", "a - b");
        assert_eq!(filter_pair(&p, &cfg), FilterDecision::Keep);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            CorpusFilterConfig { max_length_ratio: 1.0, ..Default::default() },
            CorpusFilterConfig { min_words: 0, ..Default::default() },
            CorpusFilterConfig { min_words: 10, max_words: 5, ..Default::default() },
            CorpusFilterConfig { perturb_prob: 1.5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(CorpusFilterConfig::default().validate().is_ok());
    }

    #[test]
    fn pair_invariants() {
        assert!(ParallelPair::new("  ", "x", "en", "fr").is_err());
        assert!(ParallelPair::new("x", "y", "en", "en").is_err());
        assert!(LanguagePair::new("en", "en").is_err());
        let langs = LanguagePair::new("en", "fr").unwrap();
        assert_eq!(langs.other("fr").unwrap(), "en");
        assert!(langs.other("de").is_err());
    }

    #[test]
    fn perturbation_rule() {
        let p = pair("The cat sleeps.", "Da kato dormu.");
        let q = apply_casing_perturbation(&p);
        assert_eq!(q.source, "the cat sleeps");
        assert_eq!(q.target, "da kato dormu");
        assert_eq!(apply_casing_perturbation(&q), q);

        let never = CorpusFilterConfig { perturb_prob: 0.0, ..Default::default() };
        let always = CorpusFilterConfig { perturb_prob: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(perturb_casing(&p, &never, &mut rng), p);
        assert_eq!(perturb_casing(&p, &always, &mut rng), q);
    }

    #[test]
    fn only_one_terminal_mark_is_stripped() {
        let p = pair("Really?!", "Vere?!");
        let q = apply_casing_perturbation(&p);
        assert_eq!(q.source, "really?");
        assert_eq!(q.target, "vere?");
    }

    #[test]
    fn tsv_and_aligned_io() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![pair("The cat.", "Le chat."), pair("A dog", "Un chien")];
        let tsv = dir.path().join("c.tsv");
        write_tsv(&tsv, &pairs).unwrap();
        assert_eq!(read_tsv(&tsv, "en", "fr").unwrap(), pairs);
        let (s, t) = (dir.path().join("c.src"), dir.path().join("c.tgt"));
        write_aligned(&s, &t, &pairs).unwrap();
        assert_eq!(read_aligned(&s, &t, "en", "fr").unwrap(), pairs);
        std::fs::write(&tsv, "no tab here\n").unwrap();
        assert!(read_tsv(&tsv, "en", "fr").is_err());
    }
}
