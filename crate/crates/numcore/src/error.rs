use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    /// Operand shapes do not conform to the op's contract.
    #[error("shape contract violated in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Any other broken precondition (non-scalar loss, bad index, ...).
    #[error("contract violated in `{op}`: {detail}")]
    Contract { op: &'static str, detail: String },

    /// NaN or infinity appeared in an op's output or in a gradient.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
