//! Unsupervised-to-online reinforcement learning at desk scale.
//!
//! A skill-conditioned agent is pretrained offline on an unlabeled dataset using
//! Hilbert (temporal-distance) features and intrinsic rewards, converted into a
//! task-specific agent by identifying the best skill and matching reward scales,
//! then fine-tuned online. Supervised offline-to-online and from-scratch baselines
//! share the same machinery so the methods can be compared head to head.

pub mod bridge;
pub mod diag;
pub mod env;
mod error;
pub mod finetune;
pub mod harness;
pub mod hilp;
pub mod nn;
pub mod offline_rl;
pub mod rng;

pub use error::{Error, Result};
