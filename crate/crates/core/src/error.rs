use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by how a front end should treat them: bad input
/// (files, manifests, configs), incompatibility between stored artifacts,
/// or an internal invariant that should never break.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("attention mask has no unmasked position")]
    EmptyMask,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("{path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("manifest {path}, row {row}: {reason}")]
    Manifest {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("incompatible {what}: {left} vs {right}")]
    Incompatible {
        what: String,
        left: String,
        right: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn input(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Input {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Coarse classification used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. }
            | Error::Input { .. }
            | Error::Manifest { .. }
            | Error::Empty(_)
            | Error::Io(_) => ErrorKind::Input,
            Error::Incompatible { .. } => ErrorKind::Compatibility,
            _ => ErrorKind::Internal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Compatibility,
    Internal,
}
