use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("node {0} has no value; run forward before backward")]
    NotEvaluated(usize),

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("input `{0}` was never bound")]
    UnboundInput(String),

    #[error("duplicate leaf name `{0}`")]
    DuplicateName(String),

    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}
