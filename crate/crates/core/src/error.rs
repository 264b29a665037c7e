use thiserror::Error;

use crate::activation::ActivationConstants;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown {what} `{name}`")]
    UnknownName { what: &'static str, name: String },

    #[error("activation constants must be finite and positive: {0:?}")]
    InvalidConstants(ActivationConstants),

    #[error("activation `{0}` does not satisfy the smoothness hypotheses of the consistency bound")]
    NonSmoothActivation(&'static str),

    #[error("coefficient c is negative or non-finite at sample {index} (c = {value})")]
    NonPositiveCoefficient { index: usize, value: f64 },

    #[error("problem kind mismatch: {0}")]
    KindMismatch(String),

    #[error("relative error undefined: reference values have zero norm")]
    DegenerateTruth,

    #[error("normal equations for W3 are singular")]
    Singular,

    #[error("training diverged at iteration {iter}: loss = {value}")]
    Diverged { iter: usize, value: f64 },

    #[error("non-finite gradient for {var} at iteration {iter}")]
    NonFiniteGradient { var: String, iter: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
