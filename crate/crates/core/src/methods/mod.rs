//! Training strategies for subgroup-robust classification.
//!
//! | id         | strategy                                                   |
//! |------------|------------------------------------------------------------|
//! | `erm`      | mean cross-entropy                                         |
//! | `iw`       | fixed `1/N_g` sample weights                               |
//! | `gdro`     | adversarial subgroup weights on the simplex                |
//! | `gdro_adj` | as `gdro`, adversary sees `L_g + C/√N_g`                   |
//! | `jtt`      | upweight the errors of a short ERM run                     |
//! | `dann`     | gradient-reversal attribute adversary, upsampled stream    |
//! | `dfr`      | ERM encoder, head retrained on balanced validation rows    |
//! | `proposed` | `dann` with the `gdro` task loss, then `dfr`-style retrain |

mod config;
mod gdro;
mod model;
mod train;
mod trajectory;

pub use config::{ErrorSetRule, Method, MethodConfig, Selection};
pub use gdro::{
    adjusted_group_loss, gdro_weight_update, gdro_weight_update_partial, group_losses, GroupWeights,
};
pub use model::{extract_representations, ArchConfig, ModelStack, StackGradients};
pub use train::{
    batch_loss_weights, finetune_head, importance_weights, train, train_dann, train_dfr, train_erm,
    train_gdro, train_iw, train_jtt, train_proposed, TrainOutput,
};
pub use trajectory::{EpochRecord, Stage, Trajectory};
