//! Request semantics, independent of the HTTP layer.

use std::path::Path;

use bisync_core::corpus::LanguagePair;
use bisync_core::decode::{infill_gaps, prefix_constrained_decode, BeamConfig, InferenceModel, QuantizedParams};
use bisync_core::model::TransformerParams;
use bisync_core::protocol::{classify_update, encode_bti, encode_trn, encode_update, gap_words, TaskKind};
use bisync_core::subword::BpeModel;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Tokens the decoder may add after a forced prefix, at minimum.
const PREFIX_HEADROOM: usize = 16;

pub const DEFAULT_ALTERNATIVES: usize = 5;

fn default_alternatives() -> usize {
    DEFAULT_ALTERNATIVES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRequest {
    pub changed_text: String,
    #[serde(default)]
    pub other_text: Option<String>,
    pub changed_lang: String,
    pub other_lang: String,
    #[serde(default)]
    pub frozen_other: bool,
    /// Content of the changed box at the last synchronization.
    #[serde(default)]
    pub previous_changed_text: Option<String>,
    #[serde(default = "default_alternatives")]
    pub n_alternatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResponse {
    pub synced_text: String,
    /// `None` when the changed text did not change and nothing was decoded.
    pub task_used: Option<TaskKind>,
    pub alternatives: Vec<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRequest {
    pub source_text: String,
    pub target_text: String,
    pub source_lang: String,
    pub target_lang: String,
    /// Number of target words kept as forced prefix.
    #[serde(default)]
    pub cursor_word_index: Option<usize>,
    /// Alternative to `cursor_word_index`: a character offset into
    /// `target_text`, snapped back to the closest word start.
    #[serde(default)]
    pub cursor_char_offset: Option<usize>,
    #[serde(default = "default_alternatives")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixResponse {
    pub prefix: String,
    pub alternatives: Vec<Completion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseRequest {
    pub source_text: String,
    pub target_text: String,
    pub source_lang: String,
    pub target_lang: String,
    /// Inclusive word span of `target_text`.
    pub span_start_word: usize,
    pub span_end_word: usize,
    #[serde(default = "default_alternatives")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paraphrase {
    pub filler: String,
    pub sentence: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseResponse {
    pub original: String,
    pub alternatives: Vec<Paraphrase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub quantized: bool,
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
}

/// Word index of the closest word start at or before `offset` (in
/// characters): the number of words that end at or before it.
pub fn snap_to_word(text: &str, offset: usize) -> usize {
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in text.chars().enumerate() {
        if i >= offset {
            break;
        }
        match (c.is_whitespace(), in_word) {
            (false, false) => in_word = true,
            (true, true) => {
                in_word = false;
                words += 1;
            }
            _ => {}
        }
    }
    // A word running up to the offset ends exactly there only when the
    // offset is at a space or at the end of the text.
    if in_word && text.chars().nth(offset).is_none_or(char::is_whitespace) {
        words += 1;
    }
    words
}

/// Loads a float32 checkpoint or an int8 model file, whichever `path` is.
pub fn load_model(path: &Path) -> bisync_core::Result<InferenceModel> {
    let bytes = std::fs::read(path)?;
    match TransformerParams::<f32>::from_bytes(&bytes) {
        Ok(p) => InferenceModel::from_params(&p),
        Err(_) => InferenceModel::from_quantized(&QuantizedParams::from_bytes(&bytes)?),
    }
}

/// A loaded model with its vocabulary.
pub struct Engine {
    pub model: InferenceModel,
    pub bpe: BpeModel,
    pub languages: LanguagePair,
    pub beam: BeamConfig,
}

impl Engine {
    /// Languages default to the two tags of the vocabulary.
    pub fn new(model: InferenceModel, bpe: BpeModel, languages: Option<LanguagePair>, beam: BeamConfig) -> Result<Self, ApiError> {
        let languages = match languages {
            Some(l) => l,
            None => match bpe.languages() {
                [a, b] => LanguagePair::new(a.clone(), b.clone())?,
                other => return Err(ApiError::BadRequest(format!("vocabulary has {} languages, expected 2", other.len()))),
            },
        };
        for lang in languages.codes() {
            bpe.lang_tag(lang)?;
        }
        Ok(Self { model, bpe, languages, beam })
    }

    pub fn load(model_path: &Path, bpe_path: &Path, languages: Option<LanguagePair>, beam: BeamConfig) -> Result<Self, ApiError> {
        Self::new(load_model(model_path)?, BpeModel::load(bpe_path)?, languages, beam)
    }

    pub fn info(&self) -> ModelInfo {
        let c = &self.model.config;
        ModelInfo { quantized: self.model.is_quantized(), d_model: c.d_model, n_layers: c.n_layers, vocab_size: c.vocab_size }
    }

    fn check_langs(&self, from: &str, to: &str) -> Result<(), ApiError> {
        check_languages(&self.languages, from, to)
    }

    pub fn sync(&self, req: &SyncRequest) -> Result<SyncResponse, ApiError> {
        validate_sync(&self.languages, req)?;
        let changed = req.changed_text.trim();
        let other = req.other_text.as_deref().map(str::trim).filter(|s| !s.is_empty());
        let previous = req.previous_changed_text.as_deref().unwrap_or("");
        let task = match other {
            None => TaskKind::Trn,
            Some(y) => match classify_update(previous, changed) {
                None => {
                    return Ok(SyncResponse {
                        synced_text: y.to_string(),
                        task_used: None,
                        alternatives: Vec::new(),
                        latency_ms: 0,
                    })
                }
                Some(kind) => kind,
            },
        };
        let source = match (task, other) {
            (TaskKind::Trn, _) | (_, None) => encode_trn(&self.bpe, changed, &req.other_lang, None)?,
            (kind, Some(y)) => encode_update(&self.bpe, changed, y, kind, &req.other_lang, None)?,
        };
        let alts = prefix_constrained_decode(&self.model, &self.bpe, &source.source_ids, &[], req.n_alternatives, &self.beam)?;
        let synced_text = alts.first().map(|a| a.text.clone()).unwrap_or_default();
        if synced_text.trim().is_empty() {
            return Err(ApiError::EmptyDecode);
        }
        Ok(SyncResponse {
            synced_text,
            task_used: Some(task),
            alternatives: alts.into_iter().map(|a| a.text).collect(),
            latency_ms: 0,
        })
    }

    pub fn prefix_alternatives(&self, req: &PrefixRequest) -> Result<PrefixResponse, ApiError> {
        self.check_langs(&req.source_lang, &req.target_lang)?;
        non_empty(&req.source_text, "source_text")?;
        check_k(req.k)?;
        let words: Vec<&str> = req.target_text.split_whitespace().collect();
        let index = match (req.cursor_word_index, req.cursor_char_offset) {
            (Some(i), None) => i,
            (None, Some(off)) => snap_to_word(&req.target_text, off),
            (None, None) => 0,
            (Some(_), Some(_)) => {
                return Err(ApiError::BadRequest("give cursor_word_index or cursor_char_offset, not both".into()))
            }
        };
        if index > words.len() {
            return Err(ApiError::BadRequest(format!("cursor_word_index {index} beyond {} words", words.len())));
        }
        let prefix = words[..index].join(" ");
        let source = encode_trn(&self.bpe, &req.source_text, &req.target_lang, None)?;
        let forced = self.bpe.encode(&prefix);
        // A click late in a long sentence still leaves room to complete it.
        let beam = BeamConfig { max_len: self.beam.max_len.max(forced.len() + PREFIX_HEADROOM), ..self.beam };
        let alts = prefix_constrained_decode(&self.model, &self.bpe, &source.source_ids, &forced, req.k, &beam)?;
        Ok(PrefixResponse {
            prefix,
            alternatives: alts.into_iter().map(|a| Completion { text: a.text, score: a.score }).collect(),
        })
    }

    pub fn paraphrase(&self, req: &ParaphraseRequest) -> Result<ParaphraseResponse, ApiError> {
        self.check_langs(&req.source_lang, &req.target_lang)?;
        non_empty(&req.source_text, "source_text")?;
        check_k(req.k)?;
        let words: Vec<&str> = req.target_text.split_whitespace().collect();
        let (s, e) = (req.span_start_word, req.span_end_word);
        if s > e || e >= words.len() {
            return Err(ApiError::BadRequest(format!("span [{s}, {e}] invalid for {} words", words.len())));
        }
        let original = words[s..=e].join(" ");
        let source = encode_bti(&self.bpe, &req.source_text, &gap_words(&words, s, e + 1), &req.target_lang, None)?;
        // Over-generate: the original span and duplicates are dropped.
        let n = (2 * req.k + 2).max(self.beam.beam_size);
        let hyps = infill_gaps(&self.model, &self.bpe, &source.source_ids, n, &self.beam)?;
        let mut alternatives: Vec<Paraphrase> = Vec::new();
        for h in hyps.iter().filter(|h| h.finished) {
            let filler = self.bpe.decode(h.output_ids())?.split_whitespace().collect::<Vec<_>>().join(" ");
            if filler.is_empty() || filler == original || alternatives.iter().any(|a| a.filler == filler) {
                continue;
            }
            let sentence = [&words[..s], &[filler.as_str()][..], &words[e + 1..]].concat().join(" ");
            alternatives.push(Paraphrase { filler, sentence, score: h.normalized_score(self.beam.length_norm_alpha) });
            if alternatives.len() == req.k {
                break;
            }
        }
        Ok(ParaphraseResponse { original, alternatives })
    }
}

pub fn check_languages(pair: &LanguagePair, from: &str, to: &str) -> Result<(), ApiError> {
    if from == to || !pair.contains(from) || !pair.contains(to) {
        let [a, b] = pair.codes();
        return Err(ApiError::BadRequest(format!("languages must be {a} and {b}, got {from} -> {to}")));
    }
    Ok(())
}

/// Checks that do not need a model; a frozen target is refused before
/// anything else about the texts is looked at.
pub fn validate_sync(pair: &LanguagePair, req: &SyncRequest) -> Result<(), ApiError> {
    check_languages(pair, &req.changed_lang, &req.other_lang)?;
    if req.frozen_other {
        return Err(ApiError::Frozen);
    }
    check_k(req.n_alternatives)?;
    non_empty(&req.changed_text, "changed_text")
}

fn check_k(k: usize) -> Result<(), ApiError> {
    if k == 0 {
        return Err(ApiError::BadRequest("the number of alternatives must be >= 1".into()));
    }
    Ok(())
}

fn non_empty(text: &str, field: &str) -> Result<(), ApiError> {
    if text.trim().is_empty() {
        return Err(ApiError::BadRequest(format!("{field} is empty")));
    }
    Ok(())
}
