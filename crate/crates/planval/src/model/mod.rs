//! Ensemble Gaussian dynamics model and branched model rollouts.
//!
//! Each ensemble member is an MLP mapping a normalized `(s, a)` input to the
//! mean and log-variance of a diagonal Gaussian over the normalized target
//! `(Δs, r)`, where Δs = s' − s.  Members are trained on bootstrapped
//! resamples of the real buffer by minimizing the negative log-likelihood
//!
//!   ½ Σ_d [ ln 2π + ln σ_d² + (y_d − μ_d)² / σ_d² ],
//!
//! with early stopping on a holdout split.  The members with the lowest
//! holdout NLL form the elite set; stepping the model draws one elite
//! uniformly per input row.  Branched rollouts start from real states
//! sampled out of the environment buffer and roll a policy through the
//! model for a fixed number of steps, which is how the model buffer is
//! populated.

mod ensemble;
mod rollout;
mod train;

use ndarray::Array2;

pub use ensemble::{
    model_nll, EnsembleDynamicsModel, ModelConfig, Normalization, TransitionBatch, LOG_VAR_MAX,
    LOG_VAR_MIN,
};
pub(crate) use ensemble::{join_usizes, split_usizes};
pub use rollout::{branched_rollout, TrueDynamicsStub};
pub use train::{train_model, TrainReport, HOLDOUT_PATIENCE};

use crate::error::Result;
use crate::rng::Stream;

/// How a dynamics step resolves the predictive distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Reparameterized draw μ + σ·ε.
    Sample,
    /// Predictive mean μ.
    Mean,
}

/// The randomness one dynamics step consumed: which member answered each
/// row and the target-space noise that perturbed its mean. Recording it
/// lets the step be replayed exactly, e.g. on a tape.
pub struct StepDraw {
    /// Member index per row.
    pub members: Vec<usize>,
    /// n×target_dim noise (zero in mean mode).
    pub noise: Array2<f64>,
}

/// Anything that can advance a batch of states under a batch of actions.
///
/// Implemented by the learned ensemble and by the true-dynamics test double.
pub trait Dynamics {
    /// One step per row: returns (next observations, rewards as n×1).
    fn step_batch(
        &mut self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>)>;

    /// Like [`Dynamics::step_batch`], additionally reporting the draw so
    /// the step can be replayed; dynamics without that notion return None.
    fn step_batch_recorded(
        &mut self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>, Option<StepDraw>)> {
        let (next, rewards) = self.step_batch(observations, actions, rng, mode)?;
        Ok((next, rewards, None))
    }
}

/// A stochastic policy queried batch-wise during model rollouts.
///
/// Actions are in native environment units.
pub trait Policy {
    fn act_batch(&self, observations: &Array2<f64>, rng: &mut Stream) -> Result<Array2<f64>>;
}
