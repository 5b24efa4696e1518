//! Built-in environments with oracle access to their true dynamics.
//!
//! Every environment exposes snapshot/restore of its full state, so ground
//! truth k-step rollouts can be replayed from arbitrary start states with
//! explicit noise streams — nothing draws from hidden global RNG.

mod linchain;
mod mdp_env;
mod pendulum;

pub use linchain::Linchain;
pub use mdp_env::{random_mdp, MdpEnv};
pub use pendulum::Pendulum;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Static facts about an environment.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Per-dimension action bounds; actions outside are clamped.
    pub action_low: f64,
    pub action_high: f64,
    /// Steps per episode; `done` fires exactly at this count.
    pub horizon: usize,
    /// Bounds every reachable reward stays within.
    pub reward_low: f64,
    pub reward_high: f64,
}

impl EnvSpec {
    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 {
            return Err(Error::Shape("observation and action widths must be positive".into()));
        }
        if !(self.action_low < self.action_high) || !(self.reward_low <= self.reward_high) {
            return Err(Error::Contract("inconsistent bounds".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// A snapshot of everything an episode carries.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub done: bool,
    pub step_index: usize,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A single-threaded episodic environment.
///
/// Actions arrive in native units and are clamped to the spec's bounds.
/// Stepping a finished episode is a state error; so is injecting a
/// snapshot whose episode already terminated.
pub trait Env {
    fn spec(&self) -> &EnvSpec;

    /// Starts a fresh episode, returning its first observation.
    fn reset(&mut self, rng: &mut Stream) -> Vec<f64>;

    fn step(&mut self, action: &[f64], rng: &mut Stream) -> Result<StepOutcome>;

    /// Current observation.
    fn observation(&self) -> Vec<f64>;

    /// Snapshot of the full episode state.
    fn state(&self) -> EnvState;

    /// Restores a snapshot, reconstructing internal coordinates from the
    /// observation. Terminated snapshots are rejected.
    fn set_state(&mut self, state: &EnvState) -> Result<()>;
}

pub(crate) fn check_restorable(state: &EnvState, obs_dim: usize) -> Result<()> {
    if state.done {
        return Err(Error::State("cannot inject a terminated episode".into()));
    }
    if state.observation.len() != obs_dim {
        return Err(Error::Shape(format!(
            "observation has {} entries, expected {obs_dim}",
            state.observation.len()
        )));
    }
    if state.observation.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite observation entry".into()));
    }
    Ok(())
}

pub(crate) fn clamp_action(spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
    if action.len() != spec.act_dim {
        return Err(Error::Shape(format!(
            "action has {} entries, expected {}",
            action.len(),
            spec.act_dim
        )));
    }
    if action.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN action entry".into()));
    }
    Ok(action.iter().map(|a| a.clamp(spec.action_low, spec.action_high)).collect())
}

/// Ground-truth rollout: injects `start`, applies the actions in order and
/// returns every visited observation (length k+1, starting with the start
/// observation) plus the k rewards. The episode terminating before the
/// last action is consumed is an error — the caller asked for more steps
/// than the episode had left.
pub fn oracle_rollout(
    env: &mut dyn Env,
    start: &EnvState,
    actions: &[Vec<f64>],
    rng: &mut Stream,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    env.set_state(start)?;
    let mut observations = Vec::with_capacity(actions.len() + 1);
    let mut rewards = Vec::with_capacity(actions.len());
    observations.push(env.observation());
    for (i, action) in actions.iter().enumerate() {
        let out = env.step(action, rng)?;
        observations.push(out.observation);
        rewards.push(out.reward);
        if out.done && i + 1 < actions.len() {
            return Err(Error::State(format!(
                "episode ended after {} of {} requested steps",
                i + 1,
                actions.len()
            )));
        }
    }
    Ok((observations, rewards))
}

/// Parses a CLI environment selector: `pendulum`, `linchain`, or
/// `random-mdp:<seed>:<nS>:<nA>`.
pub fn parse_env(selector: &str) -> Result<Box<dyn Env>> {
    match selector {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "linchain" => Ok(Box::new(Linchain::new())),
        other => {
            if let Some(rest) = other.strip_prefix("random-mdp:") {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "random-mdp selector needs seed:nS:nA, got {other}"
                    )));
                }
                let seed: u64 = parts[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed in {other}")))?;
                let n_states: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad state count in {other}")))?;
                let n_actions: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad action count in {other}")))?;
                let mdp = random_mdp(seed, n_states, n_actions, 0.5)?;
                Ok(Box::new(MdpEnv::new(mdp, MdpEnv::DEFAULT_HORIZON)?))
            } else {
                Err(Error::Config(format!("unknown environment {other}")))
            }
        }
    }
}
