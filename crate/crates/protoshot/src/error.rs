//! Error type shared by every module in the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the engine.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter) have incompatible shapes.
    DimMismatch {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A configuration value is inconsistent (head count, class count, ...).
    Config(String),
    /// A contract precondition was violated (non-scalar loss, invalid probabilities, ...).
    Contract(String),
    /// A prototype was requested from an empty support set.
    EmptySupport { class: String },
    /// The attentive prototype collapsed to (numerically) zero before normalization.
    DegeneratePrototype { norm: f64 },
    /// A binary file does not match the expected on-disk format.
    Format(String),
    /// A dataset record failed validation while decoding.
    CorruptRecord { index: u64, detail: String },
    /// Two records share the same id.
    DuplicateId(String),
    /// Dataset-level validation failed (missing class, empty dataset, ...).
    Validation(String),
    /// A class does not hold enough records for the requested draw.
    Sampling {
        class: String,
        needed: usize,
        available: usize,
    },
    /// A covariance matrix is not positive definite after shrinkage.
    Conditioning(String),
    /// Training produced a non-finite loss.
    NonFiniteLoss {
        epoch: usize,
        episode: usize,
        value: f64,
    },
    /// Structured-text config parse failure, with a 1-based line number.
    SpecParse { line: usize, detail: String },
    /// An I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch { op, expected, got } => write!(
                f,
                "{op}: dimension mismatch, expected {}x{} but got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::EmptySupport { class } => {
                write!(f, "empty support set for class '{class}'")
            }
            Error::DegeneratePrototype { norm } => write!(
                f,
                "attentive prototype has near-zero norm {norm:.3e} before normalization"
            ),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::CorruptRecord { index, detail } => {
                write!(f, "corrupt record {index}: {detail}")
            }
            Error::DuplicateId(id) => write!(f, "duplicate record id '{id}'"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Sampling {
                class,
                needed,
                available,
            } => write!(
                f,
                "class '{class}' has {available} records but the draw needs {needed}"
            ),
            Error::Conditioning(msg) => write!(f, "conditioning error: {msg}"),
            Error::NonFiniteLoss {
                epoch,
                episode,
                value,
            } => write!(
                f,
                "non-finite loss {value} at epoch {epoch}, episode {episode}"
            ),
            Error::SpecParse { line, detail } => {
                write!(f, "spec parse error at line {line}: {detail}")
            }
            Error::Io { path, source } => write!(f, "io error on '{path}': {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
