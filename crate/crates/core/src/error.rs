use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("{0}")]
    Protocol(String),
    #[error("not an update kind: {0}")]
    NotAnUpdateKind(String),
    #[error("sequence of length {len} exceeds max positions {max}")]
    ExceedsMaxPositions { len: usize, max: usize },
    #[error("all target positions are padding")]
    AllPadTarget,
    #[error("learning rate step must be >= 1")]
    ZeroStep,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("no gap token in gapped target")]
    NoGap,
    #[error("forced prefix of length {len} exceeds max length {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("empty reference")]
    EmptyReference,
    #[error("{0}")]
    Metric(String),
    #[error("missing test data for task {0}")]
    MissingTask(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
