//! Branched model rollouts from real start states, plus a true-dynamics stub.

use ndarray::Array2;

use crate::buffer::{SegmentBuffer, Transition};
use crate::envs::{Env, EnvState};
use crate::error::{Error, Result};
use crate::rng::Stream;

use super::ensemble::EnsembleDynamicsModel;
use super::{Dynamics, Policy, StepDraw, StepMode};

impl Dynamics for EnsembleDynamicsModel {
    fn step_batch(
        &mut self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.model_step(observations, actions, rng, mode)
    }

    fn step_batch_recorded(
        &mut self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>, Option<StepDraw>)> {
        let (members, noise) = self.draw_step_noise(observations.nrows(), rng, mode)?;
        let (next, rewards) = self.step_with(observations, actions, &members, &noise)?;
        Ok((next, rewards, Some(StepDraw { members, noise })))
    }
}

/// Test double that answers dynamics queries with the real environment:
/// each row is injected as a fresh episode state and stepped once.
pub struct TrueDynamicsStub {
    env: Box<dyn Env>,
}

impl TrueDynamicsStub {
    pub fn new(env: Box<dyn Env>) -> Self {
        TrueDynamicsStub { env }
    }
}

impl Dynamics for TrueDynamicsStub {
    fn step_batch(
        &mut self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        _mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = observations.nrows();
        if actions.nrows() != n {
            return Err(Error::Shape("observation and action rows differ".into()));
        }
        let mut next = Array2::zeros((n, observations.ncols()));
        let mut rewards = Array2::zeros((n, 1));
        for i in 0..n {
            self.env.set_state(&EnvState {
                observation: observations.row(i).to_vec(),
                done: false,
                step_index: 0,
            })?;
            let out = self.env.step(&actions.row(i).to_vec(), rng)?;
            for (j, v) in out.observation.iter().enumerate() {
                next[[i, j]] = *v;
            }
            rewards[[i, 0]] = out.reward;
        }
        Ok((next, rewards))
    }
}

/// Rolls `policy` through `model` for `length` steps from `n_starts` states
/// drawn uniformly out of the environment buffer, returning one contiguous
/// segment per start.  Model transitions never terminate, so every emitted
/// step carries `done = false`.
pub fn branched_rollout(
    model: &mut dyn Dynamics,
    policy: &dyn Policy,
    env_buffer: &SegmentBuffer,
    n_starts: usize,
    length: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<Transition>>> {
    if length == 0 || n_starts == 0 {
        return Err(Error::Contract(
            "branched rollouts need positive length and start count".into(),
        ));
    }
    let first = env_buffer.transition(env_buffer.sample_index(rng)?).observation.clone();
    let obs_dim = first.len();
    let mut obs = Array2::zeros((n_starts, obs_dim));
    obs.row_mut(0).assign(&ndarray::ArrayView1::from(&first[..]));
    for i in 1..n_starts {
        let row = &env_buffer.transition(env_buffer.sample_index(rng)?).observation;
        for (j, v) in row.iter().enumerate() {
            obs[[i, j]] = *v;
        }
    }

    let mut segments: Vec<Vec<Transition>> = vec![Vec::with_capacity(length); n_starts];
    for _ in 0..length {
        let actions = policy.act_batch(&obs, rng)?;
        let (next, rewards) = model.step_batch(&obs, &actions, rng, StepMode::Sample)?;
        for i in 0..n_starts {
            segments[i].push(Transition {
                observation: obs.row(i).to_vec(),
                action: actions.row(i).to_vec(),
                reward: rewards[[i, 0]],
                next_observation: next.row(i).to_vec(),
                done: false,
            });
        }
        obs = next;
    }
    Ok(segments)
}
