//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Only the operations the matching pipeline needs are provided. Every
//! iterative procedure (Sinkhorn in particular) is differentiated by
//! unrolling its steps onto the tape.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_many};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
}
