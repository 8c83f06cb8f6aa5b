use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on shape.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// Architecture or layer parameters are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data is out of range or malformed.
    #[error("invalid input: {0}")]
    Input(String),
    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Misuse of the computation graph.
    #[error("graph error: {0}")]
    Graph(String),
}
