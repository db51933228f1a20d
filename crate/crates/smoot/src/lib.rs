//! Saliency-guided training with per-image adaptive mask counts.
//!
//! The crate bundles four pieces:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine (dense tensors, a
//!   recorded op graph, gradients w.r.t. parameters *and* inputs),
//! * [`saliency`] — input-gradient attribution, feature ranking and the
//!   masking function that replaces selected pixels with random values
//!   drawn from the value range of the surviving pixels,
//! * [`train`] — the three training methods (`traditional`, `sgt` with a
//!   fixed mask count, `smoot` with a per-image mask count driven by
//!   softmax differences) plus SGD/Adadelta,
//! * [`eval`] — modification-based evaluation: accuracy-drop curves,
//!   their AUC, and the per-image masking-response diagnostic.
//!
//! The `smoot` binary exposes all of it behind `train` / `eval` /
//! `diagnose` / `export-saliency` subcommands; see the guide in `book/`
//! for a walk-through.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod model;
pub mod optim;
pub mod saliency;
pub mod tensor;
pub mod train;

mod book;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    Shape(String),
    /// Invalid argument value (rates, counts, fractions ...).
    Parameter(String),
    /// NaN or other numeric breakdown.
    Numeric(String),
    /// Out-of-range index (labels, sample ids ...).
    Index(String),
    /// API misuse (e.g. backward from a non-scalar).
    Usage(String),
    /// Malformed file contents (IDX magic, checkpoint header ...).
    Format(String),
    /// Files that should agree do not (e.g. image/label counts).
    Consistency(String),
    /// Invalid run configuration, with a field-level message.
    Config(String),
    /// Missing per-sample state.
    State(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Consistency(m) => write!(f, "consistency error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
