//! Boosting-ticket toolkit: a small CPU autodiff engine, magnitude pruning
//! and ticket extraction, FGSM/PGD attacks and adversarial training, and a
//! reproducible experiment harness.

pub mod attack;
pub mod autodiff;
pub(crate) mod container;
pub mod error;
pub mod harness;
pub mod data;
pub mod nn;
pub mod optim;
pub mod prune;
pub(crate) mod rng;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, AttackLoss, Domain};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use harness::{RunConfig, SweepSpec};
pub use nn::{Checkpoint, ModelSpec, ParamSet};
pub use optim::{Schedule, SgdConfig};
pub use prune::{Mask, Scope, Ticket};
pub use tensor::Tensor;
pub use train::{PipelineConfig, TrainConfig, TrainMode};
