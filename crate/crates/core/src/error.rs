use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (empty input, NaN where a
    /// finite value is required, a cache used out of order, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("finite-difference oracle failed at coordinate {coordinate}: f = {value}")]
    OracleFailure { coordinate: usize, value: f64 },

    #[error("refusing to enumerate: {0}")]
    Refused(String),

    #[error("invalid symbol {symbol} (vocabulary size {vocab})")]
    Vocabulary { symbol: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{param}`{}", utterance.as_ref().map(|u| format!(" (utterance {u})")).unwrap_or_default())]
    NonFiniteGradient {
        param: String,
        utterance: Option<String>,
    },

    #[error("decoding produced no complete hypothesis within {cap} alignment steps (best partial: {best_partial:?})")]
    NoCompleteHypothesis {
        cap: usize,
        best_partial: Option<Vec<usize>>,
    },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
