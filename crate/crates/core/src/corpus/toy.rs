//! A synthetic language pair small enough to learn on one CPU.
//!
//! Source sentences come from a tiny PCFG over a closed vocabulary. The
//! target side is a word-for-word lexicon lookup plus two rules: an
//! adjective run moves after its noun, and each adjective takes the noun's
//! class marker as suffix. With a single register the mapping is a
//! deterministic function of the source. With more registers every target
//! sentence is rendered in one of several equally likely styles (a suffix on
//! every word plus an optional leading particle) that the source does not
//! reveal, which gives the pair the kind of free variation that makes
//! retranslation drift away from an existing translation.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParallelPair;
use crate::{Error, Result};

pub const TOY_SOURCE_LANG: &str = "srcish";
pub const TOY_TARGET_LANG: &str = "tgtish";

const LEXICON_TSV: &str = include_str!("../../data/toy_lexicon.tsv");
const REGISTERS_TSV: &str = include_str!("../../data/toy_registers.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToyPos {
    Determiner,
    Adjective,
    Noun,
    IntransitiveVerb,
    TransitiveVerb,
    Adverb,
    Preposition,
}

impl ToyPos {
    fn from_section(name: &str) -> Option<Self> {
        Some(match name {
            "det" => ToyPos::Determiner,
            "adj" => ToyPos::Adjective,
            "noun" => ToyPos::Noun,
            "verb_intransitive" => ToyPos::IntransitiveVerb,
            "verb_transitive" => ToyPos::TransitiveVerb,
            "adverb" => ToyPos::Adverb,
            "preposition" => ToyPos::Preposition,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
struct Entry {
    translation: String,
    class: Option<char>,
    pos: ToyPos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub suffix: String,
    pub particle: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ToyLexicon {
    entries: HashMap<String, Entry>,
    by_pos: HashMap<ToyPos, Vec<String>>,
    registers: Vec<Register>,
}

impl ToyLexicon {
    /// The lexicon and register table shipped in `data/`.
    pub fn bundled() -> &'static ToyLexicon {
        static LEXICON: OnceLock<ToyLexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            ToyLexicon::parse(LEXICON_TSV, REGISTERS_TSV).expect("bundled toy lexicon is valid")
        })
    }

    pub fn parse(lexicon_tsv: &str, registers_tsv: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut by_pos: HashMap<ToyPos, Vec<String>> = HashMap::new();
        let mut section = None;
        for (i, line) in lexicon_tsv.lines().enumerate() {
            if let Some(name) = line.strip_prefix("## ") {
                section = Some(ToyPos::from_section(name.trim()).ok_or_else(|| {
                    Error::format("toy lexicon", format!("unknown section `{name}`"))
                })?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let pos = section.ok_or_else(|| {
                Error::format("toy lexicon", format!("line {} precedes any section", i + 1))
            })?;
            let cols: Vec<&str> = line.split('\t').collect();
            let [word, translation, class] = cols[..] else {
                return Err(Error::format("toy lexicon", format!("line {} needs 3 columns", i + 1)));
            };
            let class = match (pos, class) {
                (ToyPos::Noun, c) if c.chars().count() == 1 => c.chars().next(),
                (ToyPos::Adjective, "+") | (_, "-") => None,
                _ => {
                    return Err(Error::format(
                        "toy lexicon",
                        format!("line {}: bad class marker `{class}`", i + 1),
                    ))
                }
            };
            let entry = Entry { translation: translation.to_string(), class, pos };
            if entries.insert(word.to_string(), entry).is_some() {
                return Err(Error::format("toy lexicon", format!("duplicate word `{word}`")));
            }
            by_pos.entry(pos).or_default().push(word.to_string());
        }
        let mut registers = Vec::new();
        for line in registers_tsv.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols[0].parse::<usize>() != Ok(registers.len()) {
                return Err(Error::format("toy registers", format!("bad row `{line}`")));
            }
            registers.push(Register {
                suffix: cols[1].to_string(),
                particle: (!cols[2].is_empty()).then(|| cols[2].to_string()),
            });
        }
        if registers.is_empty() {
            return Err(Error::format("toy registers", "no registers"));
        }
        Ok(Self { entries, by_pos, registers })
    }

    pub fn num_word_types(&self) -> usize {
        self.entries.len()
    }

    pub fn registers(&self) -> &[Register] {
        &self.registers
    }

    pub fn words(&self, pos: ToyPos) -> &[String] {
        self.by_pos.get(&pos).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Translates a sentence of lexicon words. Capitalization of the first
    /// word and a trailing period carry over to the output.
    pub fn translate(&self, sentence: &str, register: usize) -> Result<String> {
        let reg = self.registers.get(register).ok_or_else(|| {
            Error::Config(format!("register {register} out of range"))
        })?;
        let trimmed = sentence.trim();
        let (body, period) = match trimmed.strip_suffix('.') {
            Some(b) => (b, true),
            None => (trimmed, false),
        };
        let capitalized = body.chars().next().is_some_and(char::is_uppercase);
        let words: Vec<String> = body.split_whitespace().map(str::to_lowercase).collect();
        let mut out: Vec<String> = Vec::with_capacity(words.len() + 1);
        if let Some(p) = &reg.particle {
            out.push(p.clone());
        }
        let mut adjectives: Vec<&Entry> = Vec::new();
        for w in &words {
            let entry = self.entries.get(w).ok_or_else(|| {
                Error::Protocol(format!("word `{w}` is not in the toy lexicon"))
            })?;
            match entry.pos {
                ToyPos::Adjective => adjectives.push(entry),
                ToyPos::Noun => {
                    out.push(format!("{}{}", entry.translation, reg.suffix));
                    let class = entry.class.expect("nouns carry a class");
                    for adj in adjectives.drain(..) {
                        out.push(format!("{}{}{}", adj.translation, class, reg.suffix));
                    }
                }
                _ => {
                    if !adjectives.is_empty() {
                        return Err(Error::Protocol(format!("adjective not followed by a noun before `{w}`")));
                    }
                    out.push(format!("{}{}", entry.translation, reg.suffix));
                }
            }
        }
        if !adjectives.is_empty() {
            return Err(Error::Protocol("sentence ends with an adjective".into()));
        }
        let mut text = out.join(" ");
        if capitalized {
            text = capitalize(&text);
        }
        if period {
            text.push('.');
        }
        Ok(text)
    }

    fn pick<'a, R: Rng>(&'a self, pos: ToyPos, rng: &mut R) -> &'a str {
        self.words(pos).choose(rng).expect("every part of speech is populated")
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, out: &mut Vec<String>) {
        out.push(self.pick(ToyPos::Determiner, rng).to_string());
        let n_adj = match rng.gen_range(0..100) {
            0..=29 => 0,
            30..=74 => 1,
            _ => 2,
        };
        let adjs = self.words(ToyPos::Adjective);
        for a in adjs.choose_multiple(rng, n_adj) {
            out.push(a.clone());
        }
        out.push(self.pick(ToyPos::Noun, rng).to_string());
    }

    /// S -> NP VP [Adv] [PP] [PP];  VP -> Vi | Vt NP;  PP -> Prep NP.
    fn sample_sentence<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let mut words = Vec::with_capacity(16);
        self.noun_phrase(rng, &mut words);
        if rng.gen_bool(0.25) {
            words.push(self.pick(ToyPos::IntransitiveVerb, rng).to_string());
        } else {
            words.push(self.pick(ToyPos::TransitiveVerb, rng).to_string());
            self.noun_phrase(rng, &mut words);
        }
        if rng.gen_bool(0.6) {
            words.push(self.pick(ToyPos::Adverb, rng).to_string());
        }
        for _ in 0..2 {
            if rng.gen_bool(0.55) {
                words.push(self.pick(ToyPos::Preposition, rng).to_string());
                self.noun_phrase(rng, &mut words);
            }
        }
        words
    }
}

fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Number of target registers in use; 1 makes translation deterministic.
    pub registers: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { registers: 1 }
    }
}

/// Iterator over generated pairs; see [`generate_toy_corpus`].
pub struct ToyCorpus {
    lexicon: &'static ToyLexicon,
    rng: ChaCha8Rng,
    remaining: usize,
    registers: usize,
}

impl Iterator for ToyCorpus {
    type Item = ParallelPair;

    fn next(&mut self) -> Option<ParallelPair> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let words = self.lexicon.sample_sentence(&mut self.rng);
        let register = self.rng.gen_range(0..self.registers);
        let source = format!("{}.", capitalize(&words.join(" ")));
        let target = self
            .lexicon
            .translate(&source, register)
            .expect("generated sentences use lexicon words only");
        Some(ParallelPair {
            source,
            target,
            src_lang: TOY_SOURCE_LANG.to_string(),
            tgt_lang: TOY_TARGET_LANG.to_string(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for ToyCorpus {}

/// `n` pairs of the deterministic (single-register) toy language.
pub fn generate_toy_corpus(n: usize, rng_seed: u64) -> ToyCorpus {
    generate_toy_corpus_with(n, rng_seed, &ToyConfig::default()).expect("default config is valid")
}

pub fn generate_toy_corpus_with(n: usize, rng_seed: u64, cfg: &ToyConfig) -> Result<ToyCorpus> {
    let lexicon = ToyLexicon::bundled();
    if cfg.registers == 0 || cfg.registers > lexicon.registers.len() {
        return Err(Error::Config(format!(
            "registers must lie in 1..={}",
            lexicon.registers.len()
        )));
    }
    Ok(ToyCorpus {
        lexicon,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        remaining: n,
        registers: cfg.registers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{filter_pair, CorpusFilterConfig};

    #[test]
    fn bundled_lexicon_shape() {
        let lex = ToyLexicon::bundled();
        assert!((100..=130).contains(&lex.num_word_types()));
        assert_eq!(lex.registers().len(), 6);
        assert_eq!(lex.registers()[0], Register { suffix: String::new(), particle: None });
    }

    #[test]
    fn lexicon_swap_and_agreement() {
        let lex = ToyLexicon::bundled();
        assert_eq!(lex.translate("the red cat sleeps", 0).unwrap(), "da kato reda dormu");
        assert_eq!(
            lex.translate("The big red dog sees a tree.", 0).unwrap(),
            "Da hundo grando redo vidu unu arbo."
        );
        assert_eq!(
            lex.translate("the red cat sleeps", 1).unwrap(),
            "nu dan katon redan dormun"
        );
        assert!(lex.translate("the purple cat sleeps", 0).is_err());
        assert!(lex.translate("the cat red", 0).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let a: Vec<_> = generate_toy_corpus(1, 7).collect();
        let b: Vec<_> = generate_toy_corpus(1, 7).collect();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        let c: Vec<_> = generate_toy_corpus(50, 8).collect();
        assert_ne!(&a[..], &c[..1]);
    }

    #[test]
    fn large_corpus_is_valid_and_unfiltered() {
        let cfg = CorpusFilterConfig::default();
        let mut count = 0;
        for p in generate_toy_corpus(100_000, 1) {
            p.validate().unwrap();
            assert!(filter_pair(&p, &cfg).is_keep(), "{p:?}");
            count += 1;
        }
        assert_eq!(count, 100_000);
    }

    #[test]
    fn registers_vary_only_the_target() {
        let cfg = ToyConfig { registers: 6 };
        let multi: Vec<_> = generate_toy_corpus_with(300, 5, &cfg).unwrap().collect();
        let firsts: std::collections::HashSet<_> = multi
            .iter()
            .map(|p| p.target.split_whitespace().next().unwrap().to_string())
            .collect();
        assert!(firsts.len() > 6);
        for p in &multi {
            let plain = ToyLexicon::bundled().translate(&p.source, 0).unwrap();
            assert!((0..6).any(|r| ToyLexicon::bundled().translate(&p.source, r).unwrap() == p.target));
            assert!(p.target.split_whitespace().count() >= plain.split_whitespace().count());
        }
        assert!(generate_toy_corpus_with(1, 1, &ToyConfig { registers: 0 }).is_err());
        assert!(generate_toy_corpus_with(1, 1, &ToyConfig { registers: 7 }).is_err());
    }
}
