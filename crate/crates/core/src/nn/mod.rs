//! Minimal deterministic neural-network primitives.
//!
//! Dense layers, batch normalization, ReLU, softmax cross-entropy, and SGD
//! with momentum, each with an explicit forward/backward contract. There is
//! no autodiff tape; composite modules save exactly the activations their
//! backward pass needs.

mod batchnorm;
mod linear;
mod loss;
mod optim;
mod store;
mod tensor;

pub use batchnorm::{BatchNormLayer, BnStats};
pub(crate) use linear::{axpy, dot};
pub use linear::{relu_backward, relu_forward, ChanSeg, ChannelView, LinearLayer};
pub use loss::cross_entropy;
pub use optim::{cosine_lr, SgdState};
pub use store::{ParamId, TensorKind, TensorStore};
pub use tensor::FeatureMatrix;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected} columns, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch normalization needs at least 2 rows in training mode, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("batch normalization backward is only defined for training mode")]
    UnsupportedMode,
    #[error("cross entropy: every row is ignored, loss undefined")]
    EmptyLoss,
    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange {
        label: u32,
        classes: usize,
        row: usize,
    },
    #[error("non-finite gradient in tensor `{name}` at element {index}")]
    NonFiniteGradient { name: String, index: usize },
}
