//! Training and evaluation toolkit for classifiers that must stay accurate on
//! underrepresented `(class, attribute)` subgroups.
//!
//! - [`autodiff`]: reverse-mode engine for small dense nets
//! - [`datasets`]: synthetic subgroup generator, CSV loader, splits
//! - [`methods`]: ERM, importance weighting, group DRO, JTT, DANN, DFR, and
//!   DANN with a group-DRO task loss plus head retraining
//! - [`som`]: self-organizing map and subgroup purity of representations
//! - [`metrics`]: subgroup accuracy/AUC and disparity gaps
//! - [`experiment`]: one `(seed, method)` cell end to end

// `!(x >= 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod methods;
pub mod metrics;
pub mod rng;
pub mod som;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor2;
