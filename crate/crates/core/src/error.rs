//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("cannot reduce over empty axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },

    #[error("label {label} out of range for {num_classes} classes (instance {index})")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        index: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch statistics need at least 2 values per channel, got {0}")]
    BatchStats(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("unequal series lengths are not supported: {0}")]
    UnsupportedLength(String),

    #[error("class {class} was never seen during training; global attention is unusable")]
    UnseenClass { class: usize },

    #[error("degenerate contingency table: {0}")]
    DegenerateTable(String),

    #[error("accuracy improvement undefined: reference accuracy is zero")]
    UndefinedImprovement,

    #[error("operation not supported for this model variant: {0}")]
    UnsupportedVariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
