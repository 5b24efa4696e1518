//! A small reverse-mode differentiation core.
//!
//! Losses are recorded eagerly on a [`Tape`] over dense `f64` matrices and
//! differentiated by one reverse sweep; parameters live in a [`ParamStore`]
//! that owns their Adam moments. [`nn`] builds ReLU perceptrons and the
//! tanh-Gaussian policy head on top, and [`finite_diff_check`] probes any
//! recorded loss against central differences.

mod fdcheck;
pub mod nn;
mod store;
mod tape;

pub use fdcheck::finite_diff_check;
pub use nn::{
    gaussian_head, gaussian_log_prob_infer, gaussian_mean_infer, gaussian_sample_infer,
    GaussianSample, Mlp, HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN,
};
pub use store::ParamStore;
pub(crate) use tape::tanh_sq_corr;
pub use tape::{Gradients, Tape, Var};
