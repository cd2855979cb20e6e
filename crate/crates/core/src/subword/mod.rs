//! Joint byte-pair encoding shared by both languages.
//!
//! Words are whitespace-separated; a word starts as its characters with an
//! end-of-word marker glued to the last one (`c</w>`). Reserved tokens occupy
//! the lowest ids and are never produced by [`BpeModel::encode`]: a literal
//! `<ins>` in user text is encoded character by character.
//!
//! File format (UTF-8, one item per line, stable across runs):
//!
//! ```text
//! #bisync-bpe version=1 specials=<pad>,<unk>,<s>,</s>,<ins>,<del>,<sub>,<gap>,<sep>,<en>,<fr>
//! #alphabet a b c ...
//! a b
//! ab c</w>
//! ```
//!
//! Every line after the header is one merge, in learning order.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const FORMAT_VERSION: u32 = 1;

/// Reserved tokens with fixed ids. Language tags follow at
/// [`Special::COUNT`] onwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Unk,
    Bos,
    Eos,
    Ins,
    Del,
    Sub,
    Gap,
    /// Separates fillers when an infilling target has several gaps.
    Sep,
}

impl Special {
    pub const COUNT: u32 = 9;
    pub const ALL: [Special; 9] = [
        Special::Pad,
        Special::Unk,
        Special::Bos,
        Special::Eos,
        Special::Ins,
        Special::Del,
        Special::Sub,
        Special::Gap,
        Special::Sep,
    ];

    pub const fn id(self) -> u32 {
        self as u32
    }

    pub const fn surface(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Unk => "<unk>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Ins => "<ins>",
            Special::Del => "<del>",
            Special::Sub => "<sub>",
            Special::Gap => "<gap>",
            Special::Sep => "<sep>",
        }
    }
}

pub const PAD: u32 = Special::Pad.id();
pub const UNK: u32 = Special::Unk.id();
pub const BOS: u32 = Special::Bos.id();
pub const EOS: u32 = Special::Eos.id();

#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    languages: Vec<String>,
    alphabet: Vec<char>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i == last { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Standard BPE learning. Ties in pair frequency go to the
/// lexicographically smallest pair.
pub fn learn_bpe<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    num_merges: usize,
    languages: &[&str],
) -> Result<BpeModel> {
    let mut word_counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &c)| (word_symbols(w), c))
        .collect();
    // Sorted so that learning never depends on hash iteration order.
    words.sort();
    let alphabet: Vec<char> = {
        let set: HashSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        let mut v: Vec<char> = set.into_iter().collect();
        v.sort_unstable();
        v
    };

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, c) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.to_string(), right.to_string());
        for (symbols, _) in &mut words {
            merge_pair(symbols, &left, &right);
        }
        merges.push((left, right));
    }
    BpeModel::from_parts(merges, alphabet, languages)
}

impl BpeModel {
    fn from_parts(
        merges: Vec<(String, String)>,
        alphabet: Vec<char>,
        languages: &[&str],
    ) -> Result<Self> {
        if languages.len() < 2 {
            return Err(Error::Config("a BPE model needs at least two languages".into()));
        }
        let mut vocab: Vec<String> = Special::ALL.iter().map(|s| s.surface().to_string()).collect();
        vocab.extend(languages.iter().map(|l| format!("<{l}>")));
        let mut index: HashMap<String, u32> = HashMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate reserved token {t}")));
            }
        }
        let mut push = |tok: String, vocab: &mut Vec<String>| {
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), vocab.len() as u32);
                vocab.push(tok);
            }
        };
        for c in &alphabet {
            push(c.to_string(), &mut vocab);
            push(format!("{c}{END_OF_WORD}"), &mut vocab);
        }
        for (l, r) in &merges {
            push(format!("{l}{r}"), &mut vocab);
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(Self {
            merges,
            ranks,
            vocab,
            index,
            languages: languages.iter().map(|s| s.to_string()).collect(),
            alphabet,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Number of reserved ids (structural, control and language tags).
    pub fn num_reserved(&self) -> u32 {
        Special::COUNT + self.languages.len() as u32
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        id < self.num_reserved()
    }

    pub fn lang_tag(&self, lang: &str) -> Result<u32> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .map(|i| Special::COUNT + i as u32)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn is_lang_tag(&self, id: u32) -> bool {
        (Special::COUNT..self.num_reserved()).contains(&id)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        // `None` marks an unknown character, which never merges.
        let mut symbols: Vec<Option<String>> = word_symbols(word)
            .into_iter()
            .map(|s| self.index.contains_key(&s).then_some(s))
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let (Some(l), Some(r)) = (&symbols[i], &symbols[i + 1]) {
                    if let Some(&rank) = self.ranks.get(&(l.clone(), r.clone())) {
                        if best.is_none_or(|(_, b)| rank < b) {
                            best = Some((i, rank));
                        }
                    }
                }
            }
            let Some((_, rank)) = best else { break };
            let (l, r) = self.merges[rank].clone();
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i].as_deref() == Some(l.as_str()) && symbols[i + 1].as_deref() == Some(r.as_str()) {
                    symbols[i] = Some(format!("{l}{r}"));
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        out.extend(symbols.iter().map(|s| match s {
            Some(s) => self.index[s],
            None => UNK,
        }));
    }

    /// Token ids for `text`; never emits a reserved id other than UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Whitespace-separated words of `text`, each encoded separately.
    pub fn encode_words(&self, text: &str) -> Vec<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                let mut v = Vec::new();
                self.encode_word(w, &mut v);
                v
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode). PAD/BOS/EOS are dropped; other
    /// reserved tokens are rendered as standalone words.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if self.is_reserved(id) {
                let _ = write!(text, " {tok} ");
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                text.push_str(stem);
                text.push(' ');
            } else {
                text.push_str(tok);
            }
        }
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    /// Number of word boundaries (tokens ending a word) in `ids`.
    pub fn count_words(&self, ids: &[u32]) -> usize {
        ids.iter()
            .filter(|&&id| self.is_word_final(id))
            .count()
    }

    pub fn is_word_final(&self, id: u32) -> bool {
        self.token(id).is_some_and(|t| t.ends_with(END_OF_WORD))
    }

    pub fn to_text(&self) -> String {
        let specials: Vec<&str> = self.vocab[..self.num_reserved() as usize]
            .iter()
            .map(String::as_str)
            .collect();
        let alphabet: Vec<String> = self.alphabet.iter().map(char::to_string).collect();
        let mut s = format!(
            "#bisync-bpe version={FORMAT_VERSION} specials={}\n#alphabet {}\n",
            specials.join(","),
            alphabet.join(" ")
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("BPE model", "empty file"))?;
        let rest = header
            .strip_prefix("#bisync-bpe version=")
            .ok_or_else(|| Error::format("BPE model", "missing header"))?;
        let (version, specials) = rest
            .split_once(" specials=")
            .ok_or_else(|| Error::format("BPE model", "missing special-token list"))?;
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(Error::format("BPE model", format!("unsupported version {version}")));
        }
        let specials: Vec<&str> = specials.split(',').collect();
        let fixed: Vec<&str> = Special::ALL.iter().map(|s| s.surface()).collect();
        if specials.len() < fixed.len() + 2 || specials[..fixed.len()] != fixed[..] {
            return Err(Error::format("BPE model", "special-token list does not match"));
        }
        let languages: Vec<&str> = specials[fixed.len()..]
            .iter()
            .map(|t| t.strip_prefix('<').and_then(|t| t.strip_suffix('>')))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::format("BPE model", "bad language tag"))?;
        let alphabet_line = lines
            .next()
            .and_then(|l| l.strip_prefix("#alphabet"))
            .ok_or_else(|| Error::format("BPE model", "missing alphabet"))?;
        let alphabet = alphabet_line
            .split_whitespace()
            .map(|s| {
                let mut cs = s.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::format("BPE model", format!("bad alphabet entry `{s}`"))),
                }
            })
            .collect::<Result<Vec<char>>>()?;
        let merges = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::format("BPE model", format!("bad merge `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(merges, alphabet, &languages)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LANGS: [&str; 2] = ["en", "fr"];

    #[test]
    fn most_frequent_pair_merges_first() {
        let m = learn_bpe(["ab", "ab", "ac"], 1, &LANGS).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "b</w>".to_string())]);
    }

    #[test]
    fn encode_applies_merges() {
        let m = learn_bpe(["ab", "ab", "ac"], 1, &LANGS).unwrap();
        let ids = m.encode("ab ac");
        let toks: Vec<&str> = ids.iter().map(|&i| m.token(i).unwrap()).collect();
        assert_eq!(toks, ["ab</w>", "a", "c</w>"]);
        assert!(m.encode("").is_empty());
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = learn_bpe(["hello world"], 0, &LANGS).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.encode("hello").len(), 5);
        assert_eq!(m.decode(&m.encode("hello world")).unwrap(), "hello world");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(learn_bpe(Vec::<&str>::new(), 10, &LANGS), Err(Error::EmptyCorpus)));
        assert!(matches!(learn_bpe(["  "], 10, &LANGS), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the dog sat", "a cat and a dog"];
        let a = learn_bpe(corpus, 20, &LANGS).unwrap();
        let b = learn_bpe(corpus, 20, &LANGS).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b</w>) and (c,d</w>) both occur twice.
        let m = learn_bpe(["cd ab", "ab cd"], 1, &LANGS).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn decode_strips_structure_and_checks_range() {
        let m = learn_bpe(["ab ac"], 2, &LANGS).unwrap();
        assert_eq!(m.decode(&[]).unwrap(), "");
        let mut ids = vec![BOS];
        ids.extend(m.encode("ab ac"));
        ids.push(PAD);
        ids.push(EOS);
        assert_eq!(m.decode(&ids).unwrap(), "ab ac");
        assert!(matches!(m.decode(&[9999]), Err(Error::UnknownTokenId(9999))));
    }

    #[test]
    fn reserved_surface_strings_are_escaped() {
        let m = learn_bpe(["<ins> <gap> <en> text"], 50, &LANGS).unwrap();
        let ids = m.encode("<ins> <gap> <en>");
        assert!(ids.iter().all(|&i| !m.is_reserved(i)), "{ids:?}");
        assert_eq!(m.decode(&ids).unwrap(), "<ins> <gap> <en>");
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let m = learn_bpe(["abc"], 2, &LANGS).unwrap();
        let ids = m.encode("axb");
        assert!(ids.contains(&UNK));
        assert_eq!(m.lang_tag("fr").unwrap(), Special::COUNT + 1);
        assert!(m.lang_tag("de").is_err());
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let m = learn_bpe(["the cat sat", "la chatte", "éà ç"], 15, &LANGS).unwrap();
        let text = m.to_text();
        let back = BpeModel::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert!(BpeModel::from_text("garbage").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_on_training_alphabet(words in proptest::collection::vec("[a-e]{1,6}", 1..8)) {
            let corpus = ["abc dea bad cab", "eed ace bead"];
            let m = learn_bpe(corpus, 12, &LANGS).unwrap();
            let text = words.join(" ");
            let ids = m.encode(&text);
            prop_assert!(ids.iter().all(|&i| !m.is_reserved(i)));
            prop_assert_eq!(m.decode(&ids).unwrap(), text);
        }
    }
}
