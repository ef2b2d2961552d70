//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector with Euclidean norm at or below 1e-12 cannot be normalized.
    #[error("cannot normalize vector with near-zero norm ({norm:.3e})")]
    NearZeroNorm { norm: f64 },

    /// Operand dimensions do not line up.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Every anchor in a contrastive batch has zero positives.
    #[error("degenerate contrastive batch: no anchor has a positive partner")]
    DegenerateBatch,

    /// A soft target does not form a probability distribution.
    #[error("target row {row} is not a probability distribution (sum {sum})")]
    InvalidTarget { row: usize, sum: f64 },

    /// Neighbor count out of range for the instance size.
    #[error("invalid neighbor count k={k} for {n} samples")]
    BadK { k: usize, n: usize },

    /// A class mapping entry points outside [0, classes).
    #[error("asymmetric noise mapping sends class {class} to {target}, outside 0..{classes}")]
    InvalidMapping {
        class: usize,
        target: usize,
        classes: usize,
    },

    /// Could not place mutually separated blob centers.
    #[error("failed to place blob center {class} after {attempts} attempts")]
    CenterPackingFailed { class: usize, attempts: usize },

    /// Fine-tuning requires at least one detected-clean sample.
    #[error("clean set is empty; cannot fine-tune")]
    EmptyCleanSet,

    /// Bad configuration value or combination.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Text input (dataset file, config file, detection CSV) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint file is missing, truncated, or malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
