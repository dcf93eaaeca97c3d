use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: i64, classes: usize },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("cannot rescale parameters with zero norm")]
    ZeroNorm,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("parse error in {source_name} at record {record}: {detail}")]
    Parse {
        source_name: String,
        record: usize,
        detail: String,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
