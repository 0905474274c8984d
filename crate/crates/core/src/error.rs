//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Receiver placement could not satisfy the requested per-sector count.
    #[error("sector {sector}: wedge cannot host {requested} receivers at {spacing_m} m spacing within {max_radius_m} m of the base station")]
    WedgeTooSmall {
        sector: usize,
        requested: usize,
        spacing_m: f64,
        max_radius_m: f64,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown sector {0} (expected 0, 1, or 2)")]
    UnknownSector(u8),

    #[error("missing sector tag and routing policy requires one")]
    MissingSector,

    #[error("checkpoint config hash mismatch: expected {expected}, found {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("ensemble member '{member}' failed: {source}")]
    Member {
        member: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
