use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("graph structure error: {0}")]
    Structure(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown node: {0}")]
    Lookup(String),
    #[error("illegal path: {0}")]
    Legality(String),
    #[error("missing coverage: {0}")]
    Coverage(String),
    #[error("invalid mask: {0}")]
    Validation(String),
    #[error("unknown op descriptor: {0}")]
    Descriptor(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged at iteration {iter}: {msg}")]
    Divergence { iter: u64, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
