//! Bilingual text synchronization.
//!
//! A single encoder-decoder model is multi-tasked over regular translation,
//! resynchronization of a stale translation after a source edit (insertion,
//! deletion, substitution) and bilingual text infilling. Tasks are selected
//! with control tokens appended to the source side, so the architecture and
//! decoding algorithms are those of a plain translation model.
//!
//! The crate is organised along the data flow:
//!
//! * [`corpus`]: toy language pair generator, filtering, casing perturbation
//! * [`subword`]: joint BPE vocabulary with reserved control tokens
//! * [`protocol`]: control-token sequence layouts and edit classification
//! * [`synthgen`]: synthetic update/infilling triplets from parallel pairs
//! * [`model`]: transformer, training loop, checkpoints
//! * [`decode`]: beam search, prefix-constrained decoding, infilling, int8
//! * [`eval`]: BLEU, TER and the task-wise evaluation harness
//! * [`experiment`]: end-to-end recipes shared by the CLI and the test suites

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod protocol;
pub mod subword;
pub mod synthgen;

pub use error::{Error, Result};
