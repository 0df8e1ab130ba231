//! Reverse-mode differentiation for small dense classifiers.
//!
//! Supported primitives: dense layers, ReLU, gradient reversal, and fused
//! softmax cross-entropy. Everything runs in `f64`.

mod graph;
mod loss;
mod optim;

pub use graph::{Backprop, GradReversal, Gradients, Graph, GraphBuilder, Op, Param};
pub use loss::{per_sample_xent, softmax, xent_grad};
pub use optim::{Sgd, SgdConfig};
