//! Wasserstein distance network: per-domain affine maps trained against
//! per-(treatment, domain pair) critics.
//!
//! The objective for replicated treatments `T'` is
//!
//! ```text
//! L = 1/|T'| Σ_t 2/(|D_t|(|D_t|−1)) Σ_{i<j} [ W_{t,i,j} − g_{t,i,j} ]
//! ```
//!
//! where `W` is the critic loss (mean critic value on transformed domain-`i`
//! samples minus the mean on domain-`j` samples) and `g` the one-sided
//! gradient penalty at random interpolates. Critics ascend `L`, transforms
//! descend it.

mod affine;
mod checkpoint;
mod critic;
mod loss;
mod model;
mod rmsprop;
mod train;

pub use affine::AffineTransform;
pub use checkpoint::{
    config_fingerprint, Checkpoint, CriticParams, DomainParams, Payload, WdnParams, CHECKPOINT_VERSION,
};
pub use critic::{critic_loss, gradient_penalty, interpolate, interpolate_with, CriticNet};
pub use loss::{backward, wdn_loss, GradientSet, KeyBatch, KeyTerm, LossBreakdown, Minibatches, WdnGradients};
pub use model::{CriticKey, LossMode, WdnModel};
pub use rmsprop::{rmsprop_step, RmsProp};
pub use train::{
    pretrain_critics, train, wdn_apply, Objective, Phase, TrainConfig, TrainError, TrainEvent, TrainObserver, Trainer,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WdnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input to critic")]
    NonFiniteInput,
    #[error("minibatch sizes differ ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("no minibatch supplied for critic {0}")]
    MissingBatch(String),
    #[error("non-finite gradient at {path}")]
    NonFiniteGradient { path: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("no transform for domain {0:?}")]
    UnknownDomain(String),
    #[error("group {treatment:?} in domain {domain:?} has no rows")]
    EmptyGroup { treatment: String, domain: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl WdnError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, WdnError::NonFiniteGradient { .. } | WdnError::NonFiniteLoss { .. })
    }
}
