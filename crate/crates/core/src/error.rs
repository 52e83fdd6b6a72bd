//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The CLI maps error
//! categories to process exit codes: usage/configuration problems exit 1,
//! data problems (missing or malformed inputs) exit 2, and incompatibilities
//! between artifacts (version, variant or channel-count mismatches) exit 3.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem failure while touching `path`.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed serialized data (manifest, checkpoint, bitstream, CSV, PMF
    /// file): syntactically unreadable or truncated.
    #[error("parse: {0}")]
    Parse(String),

    /// Structurally valid data that violates a documented invariant
    /// (negative probabilities, duplicate group ids, empty view lists, ...).
    #[error("schema: {0}")]
    Schema(String),

    /// Tensor-shape mismatch between values that must agree.
    #[error("shape: {0}")]
    Shape(String),

    /// Artifacts that are individually valid but cannot be combined:
    /// container/checkpoint version, variant or channel-count mismatches.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Invalid configuration supplied by the caller (bad flag combinations,
    /// out-of-range hyperparameters, missing required inputs).
    #[error("config: {0}")]
    Config(String),

    /// Operation invoked on a model variant that does not support it.
    #[error("variant: {0}")]
    Variant(String),

    /// Numerical divergence during training; the last finite checkpoint is
    /// preserved at the configured output path.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// Corrupt or internally inconsistent bitstream payload.
    #[error("decode: {0}")]
    Decode(String),
}

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Incompatible(_) | Error::Variant(_) => 3,
            _ => 2,
        }
    }

    /// Short machine-parseable category tag used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
            Error::Schema(_) => "schema",
            Error::Shape(_) => "shape",
            Error::Incompatible(_) => "incompatible",
            Error::Config(_) => "config",
            Error::Variant(_) => "variant",
            Error::Diverged { .. } => "diverged",
            Error::Decode(_) => "decode",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            path: PathBuf::new(),
            source: e,
        }
    }
}

/// Attach a path to a bare I/O error.
pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
