//! Crate-wide error type.

/// Errors surfaced by the toolkit. Variants mirror the failure classes of the
/// public operations: schema/parse problems, vocabulary violations, domain
/// precondition failures, model/configuration mismatches, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {context}: {detail}")]
    Parse { context: String, detail: String },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("incompatible {what}: expected {expected}, found {found}")]
    Incompatible {
        what: String,
        expected: String,
        found: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
