use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> AutogradError {
    AutogradError::Shape { op, expected: expected.into(), got: format!("{got:?}") }
}
