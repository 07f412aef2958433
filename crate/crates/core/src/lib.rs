//! Domain-aware group relative policy optimization at desk scale.
//!
//! The crate trains a tiny autoregressive categorical policy with GRPO and
//! two additions that inject a transformation prior: a KL constraint between
//! the policy on transformed and original inputs, and advantage shaping by
//! the per-sample JS divergence between the same two distributions.
//!
//! Module map:
//!
//! * [`ad`]: reverse-mode autodiff over small dense arrays
//! * [`policy`]: the policy network, sampling, teacher forcing, snapshots
//! * [`divergence`]: exact KL and JS kernels
//! * [`grpo`]: advantage normalization and the GRPO objective
//! * [`domain`]: transforms, domain loss, shaping, combined objective
//! * [`task`]: synthetic invariance tasks, rewards, evaluation
//! * [`trainer`]: the optimization loop and the ablation grid
//! * [`config`]: flat `key = value` experiment configuration
//! * [`verify`]: executable invariant suite

pub mod ad;
pub mod array;
pub mod config;
pub mod divergence;
pub mod domain;
pub mod error;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod task;
pub mod trainer;
pub mod verify;

pub use array::Array;
pub use error::{Error, Result};
