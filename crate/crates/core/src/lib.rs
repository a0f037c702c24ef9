//! Information-directed exploration for Q-learning at desk scale.
//!
//! The crate splits into: tabular environments with exact ground truth
//! ([`envs`]), a heteroscedastic Gaussian-process bandit ([`gp_bandit`]),
//! return-distribution machinery ([`distributional`]), a small ensemble
//! network with Adam ([`nn`]), the information-directed action rule
//! ([`ids_policy`]) and the training loop wiring ([`agent`]).

pub mod agent;
pub mod distributional;
pub mod envs;
pub mod error;
pub mod gp_bandit;
pub mod ids_policy;
pub mod nn;

pub use error::{CoreError, Result};
