//! Model-based reinforcement learning built around multi-step plan values.
//!
//! A plan value Q(s, τ) scores a state together with the next k actions
//! instead of a single action. The crate provides:
//!
//! - exact planning policy iteration on finite MDPs ([`tabular`]), in both
//!   greedy and entropy-regularized forms, with the plan-space Bellman
//!   operator exposed directly;
//! - a small reverse-mode autodiff core over dense `f64` arrays ([`diff`])
//!   that the neural components are written against;
//! - toy continuous-control and tabular-embedded environments ([`envs`]);
//! - an ensemble Gaussian dynamics model ([`model`]), a k-step plan-value
//!   critic ([`critic`]) and a planning actor trained with multi-step
//!   pathwise gradients ([`actor`]);
//! - the training loops and ablation variants ([`trainer`]) plus the
//!   gradient-direction and value-bias studies ([`analysis`]).
//!
//! The `planval` binary exposes training and the two studies as subcommands.

pub mod actor;
pub mod analysis;
pub mod buffer;
pub mod ckpt;
pub mod critic;
pub mod diff;
pub mod envs;
pub mod error;
pub mod model;
pub mod rng;
pub mod sac;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
