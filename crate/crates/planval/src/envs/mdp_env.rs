//! A finite MDP behind the continuous environment interface, plus the
//! seeded random-MDP generator.
//!
//! States appear as one-hot observations and the scalar action in [−1, 1]
//! is binned into the MDP's actions, so agents built for continuous
//! control can run on problems whose exact values are known.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tabular::TabularMdp;

use super::{check_restorable, clamp_action, Env, EnvSpec, EnvState, StepOutcome};

pub struct MdpEnv {
    spec: EnvSpec,
    mdp: TabularMdp,
    state: usize,
    step_index: usize,
    done: bool,
}

impl MdpEnv {
    pub const DEFAULT_HORIZON: usize = 1000;

    pub fn new(mdp: TabularMdp, horizon: usize) -> Result<Self> {
        let (mut r_lo, mut r_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                r_lo = r_lo.min(mdp.r(s, a));
                r_hi = r_hi.max(mdp.r(s, a));
            }
        }
        let spec = EnvSpec {
            obs_dim: mdp.n_states(),
            act_dim: 1,
            action_low: -1.0,
            action_high: 1.0,
            horizon,
            reward_low: r_lo,
            reward_high: r_hi,
        };
        spec.validate()?;
        Ok(Self { spec, mdp, state: 0, step_index: 0, done: false })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    /// Center of bin `index` in [−1, 1].
    pub fn action_center(&self, index: usize) -> f64 {
        -1.0 + (2 * index + 1) as f64 / self.mdp.n_actions() as f64
    }

    /// The bin a continuous action falls into: [−1, 1] split into
    /// `n_actions` equal intervals, the right edge belonging to the last.
    pub fn action_index(&self, action: f64) -> usize {
        let n = self.mdp.n_actions();
        let idx = ((action + 1.0) / 2.0 * n as f64).floor() as isize;
        idx.clamp(0, n as isize - 1) as usize
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.mdp.n_states()];
        obs[s] = 1.0;
        obs
    }

    fn decode(&self, observation: &[f64]) -> Result<usize> {
        let mut hot = None;
        for (i, &v) in observation.iter().enumerate() {
            if (v - 1.0).abs() < 1e-9 {
                if hot.is_some() {
                    return Err(Error::State("observation has two hot entries".into()));
                }
                hot = Some(i);
            } else if v.abs() > 1e-9 {
                return Err(Error::State(format!("observation entry {i} = {v} is not one-hot")));
            }
        }
        hot.ok_or_else(|| Error::State("observation has no hot entry".into()))
    }
}

impl Env for MdpEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut Stream) -> Vec<f64> {
        self.state = rng.gen_range(0..self.mdp.n_states());
        self.step_index = 0;
        self.done = false;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64], rng: &mut Stream) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("episode already finished".into()));
        }
        let a = self.action_index(clamp_action(&self.spec, action)?[0]);
        let reward = self.mdp.r(self.state, a);
        let row = self.mdp.transition_row(self.state, a);
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut next = self.mdp.n_states() - 1;
        for (s2, &p) in row.iter().enumerate() {
            acc += p;
            if draw < acc {
                next = s2;
                break;
            }
        }
        self.state = next;
        self.step_index += 1;
        self.done = self.step_index >= self.spec.horizon;
        Ok(StepOutcome { observation: self.one_hot(self.state), reward, done: self.done })
    }

    fn observation(&self) -> Vec<f64> {
        self.one_hot(self.state)
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.one_hot(self.state),
            done: self.done,
            step_index: self.step_index,
        }
    }

    fn set_state(&mut self, state: &EnvState) -> Result<()> {
        check_restorable(state, self.spec.obs_dim)?;
        if state.step_index >= self.spec.horizon {
            return Err(Error::State("snapshot step index is past the horizon".into()));
        }
        self.state = self.decode(&state.observation)?;
        self.step_index = state.step_index;
        self.done = false;
        Ok(())
    }
}

/// Deterministic random MDP: transition rows are normalized Exp(1) draws
/// (flat Dirichlet), rewards are 0 with probability `reward_sparsity` and
/// uniform in [0, 1] otherwise, discount 0.9.
pub fn random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    reward_sparsity: f64,
) -> Result<TabularMdp> {
    if n_states == 0 || n_states > 64 || n_actions == 0 || n_actions > 8 {
        return Err(Error::Contract(format!(
            "random MDP sizes are limited to 64 states and 8 actions, got {n_states}×{n_actions}"
        )));
    }
    if !(0.0..=1.0).contains(&reward_sparsity) {
        return Err(Error::Contract(format!(
            "reward sparsity must lie in [0, 1], got {reward_sparsity}"
        )));
    }
    let mut stream = rng::derive(seed, "random-mdp");
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            let u: f64 = stream.gen_range(0.0..1.0);
            *v = -(1.0 - u).ln();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let mut reward = vec![0.0; n_states * n_actions];
    for v in reward.iter_mut() {
        if stream.gen_range(0.0..1.0) >= reward_sparsity {
            *v = stream.gen_range(0.0..1.0);
        }
    }
    TabularMdp::new(n_states, n_actions, 0.9, transition, reward)
}
