//! A small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! The operator set is closed: it covers what a two-tower attention encoder
//! with a batch-normalized classification head needs, and nothing more.
//! Every value is a row-major `f64` buffer; graphs are built eagerly on a
//! [`Graph`] tape and differentiated with [`Graph::backward`].

mod error;
pub mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    grad_check, is_hinge, operator_suite, GradCheckOptions, GradCheckReport, OperatorCheck,
};
pub use graph::{BatchNormMode, BatchStats, Graph, NodeId};
pub use rng::{mix_seed, uniform_from_counter};
pub use tensor::Tensor;
