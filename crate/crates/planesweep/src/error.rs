//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps variants to distinct exit codes: parse errors exit 2,
/// structural errors exit 3, numeric failures exit 4, everything else 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A cascade stage produced non-finite depths; carries the stage index
    /// (1-based) and how many pixels were affected.
    #[error("stage {stage} produced non-finite depth at {pixels} pixels")]
    NonFiniteDepth { stage: usize, pixels: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 2,
            Error::Structure(_) => 3,
            Error::Numeric(_) | Error::NonFiniteDepth { .. } => 4,
            _ => 1,
        }
    }
}
