use thiserror::Error;

/// Errors produced by the shape-model library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Geometry that cannot be processed (zero extent, empty mesh, ...).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Array or weight shapes that do not fit together.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("latent code has length {found}, model expects {expected}")]
    LatentLength { expected: usize, found: usize },

    /// A loss or objective evaluated to NaN or infinity.
    #[error("non-finite {term} (shape {shape})")]
    NonFinite { term: String, shape: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that originate from reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Json(_) | Error::Version { .. } | Error::Truncated(_) | Error::Format(_)
        )
    }

    /// True for errors signalling a numerical failure.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Degenerate(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
