//! Effect-proposal prompting and the diagnose-and-revise loop.
//!
//! The crate turns a joint context plus rendered joint images into a
//! deterministic chat prompt, sends it through a pluggable transport,
//! parses the structured proposal out of the reply (tolerating code fences,
//! with a bounded repair budget for malformed JSON), and iterates
//! propose → compile → profile → feedback until the model reports
//! completion. Every request, response, proposal, compiled field, and
//! diagnostic rendering is persisted per round so a run can be audited and
//! replayed offline.

pub mod prompt;
pub mod session;
pub mod transport;

use joda_core::field::FieldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("JODA_API_KEY is not set in the environment")]
    MissingKey,
    #[error("unknown backend {0:?}; expected one of: openai, gemini")]
    UnknownBackend(String),
    #[error("chat endpoint returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("network: {0}")]
    Network(String),
    #[error("response missing expected structure: {0}")]
    MalformedResponse(String),
    #[error("no parsable proposal after {attempts} attempts; last reply: {raw}")]
    Unparseable { attempts: usize, raw: String },
    #[error(
        "prompt needs at least one image; pass the explicit no-image input to skip attachments"
    )]
    NoImages,
    #[error("request size {size} bytes exceeds the {cap} byte cap")]
    TooLarge { size: usize, cap: usize },
    #[error("iteration policy: {0}")]
    Policy(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
}

impl VlmError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
