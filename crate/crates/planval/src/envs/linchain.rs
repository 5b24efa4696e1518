//! A 1-D linear-Gaussian chain: s' = 0.9·s + 0.5·a + 0.05·ε with
//! ε ~ N(0, 1), reward −s² − 0.1·a² from the pre-step state, horizon 50.
//! Its known coefficients make it the model-recovery test bed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, Stream};

use super::{check_restorable, clamp_action, Env, EnvSpec, EnvState, StepOutcome};

const DECAY: f64 = 0.9;
const GAIN: f64 = 0.5;
const DEFAULT_NOISE: f64 = 0.05;
const HORIZON: usize = 50;

pub struct Linchain {
    spec: EnvSpec,
    noise_scale: f64,
    s: f64,
    step_index: usize,
    done: bool,
}

impl Linchain {
    pub fn new() -> Self {
        Self::with_noise(DEFAULT_NOISE)
    }

    /// Same chain with a custom noise scale; zero makes it deterministic.
    pub fn with_noise(noise_scale: f64) -> Self {
        let spec = EnvSpec {
            obs_dim: 1,
            act_dim: 1,
            action_low: -1.0,
            action_high: 1.0,
            horizon: HORIZON,
            // |s| stays below ~12 for any plausible noise draw; the bound
            // is generous rather than tight.
            reward_low: -200.0,
            reward_high: 0.0,
        };
        spec.validate().expect("static spec");
        Self { spec, noise_scale, s: 0.0, step_index: 0, done: false }
    }

    /// True dynamics coefficients (decay, gain, noise scale).
    pub fn coefficients() -> (f64, f64, f64) {
        (DECAY, GAIN, DEFAULT_NOISE)
    }
}

impl Default for Linchain {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Linchain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut Stream) -> Vec<f64> {
        self.s = rng.gen_range(-1.0..1.0);
        self.step_index = 0;
        self.done = false;
        vec![self.s]
    }

    fn step(&mut self, action: &[f64], rng: &mut Stream) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("episode already finished".into()));
        }
        let a = clamp_action(&self.spec, action)?[0];
        let reward = -(self.s * self.s) - 0.1 * a * a;
        self.s = DECAY * self.s + GAIN * a + self.noise_scale * standard_normal(rng);
        self.step_index += 1;
        self.done = self.step_index >= self.spec.horizon;
        Ok(StepOutcome { observation: vec![self.s], reward, done: self.done })
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.s]
    }

    fn state(&self) -> EnvState {
        EnvState { observation: vec![self.s], done: self.done, step_index: self.step_index }
    }

    fn set_state(&mut self, state: &EnvState) -> Result<()> {
        check_restorable(state, self.spec.obs_dim)?;
        if state.step_index >= self.spec.horizon {
            return Err(Error::State("snapshot step index is past the horizon".into()));
        }
        self.s = state.observation[0];
        self.step_index = state.step_index;
        self.done = false;
        Ok(())
    }
}
