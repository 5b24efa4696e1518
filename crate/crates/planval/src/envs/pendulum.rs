//! Torque-limited pendulum swingup.
//!
//! Semi-implicit Euler with g = 10, m = 1, l = 1, dt = 0.05:
//!
//!   ω' = clamp(ω + dt·( (3g/2l)·sin θ + 3u/(m l²) ), ±8),
//!   θ' = θ + dt·ω',
//!
//! reward −(wrap(θ)² + 0.1·ω² + 0.001·u²) from the pre-step state, with the
//! angle wrapped into (−π, π]. The observation is (cos θ, sin θ, ω), which
//! is smooth across the wrap.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;

use super::{check_restorable, clamp_action, Env, EnvSpec, EnvState, StepOutcome};

const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const HORIZON: usize = 200;

pub struct Pendulum {
    spec: EnvSpec,
    angle: f64,
    speed: f64,
    step_index: usize,
    done: bool,
}

impl Pendulum {
    pub fn new() -> Self {
        let spec = EnvSpec {
            obs_dim: 3,
            act_dim: 1,
            action_low: -MAX_TORQUE,
            action_high: MAX_TORQUE,
            horizon: HORIZON,
            reward_low: -(std::f64::consts::PI.powi(2)
                + 0.1 * MAX_SPEED * MAX_SPEED
                + 0.001 * MAX_TORQUE * MAX_TORQUE),
            reward_high: 0.0,
        };
        spec.validate().expect("static spec");
        Self { spec, angle: 0.0, speed: 0.0, step_index: 0, done: false }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.angle.cos(), self.angle.sin(), self.speed]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

/// Wraps an angle into (−π, π].
fn wrap(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        w = std::f64::consts::PI;
    }
    w
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut Stream) -> Vec<f64> {
        self.angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        self.speed = rng.gen_range(-1.0..1.0);
        self.step_index = 0;
        self.done = false;
        self.obs()
    }

    fn step(&mut self, action: &[f64], _rng: &mut Stream) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("episode already finished".into()));
        }
        let u = clamp_action(&self.spec, action)?[0];
        let reward = -(wrap(self.angle).powi(2)
            + 0.1 * self.speed * self.speed
            + 0.001 * u * u);
        self.speed =
            (self.speed + DT * (15.0 * self.angle.sin() + 3.0 * u)).clamp(-MAX_SPEED, MAX_SPEED);
        self.angle += DT * self.speed;
        self.step_index += 1;
        self.done = self.step_index >= self.spec.horizon;
        Ok(StepOutcome { observation: self.obs(), reward, done: self.done })
    }

    fn observation(&self) -> Vec<f64> {
        self.obs()
    }

    fn state(&self) -> EnvState {
        EnvState { observation: self.obs(), done: self.done, step_index: self.step_index }
    }

    fn set_state(&mut self, state: &EnvState) -> Result<()> {
        check_restorable(state, self.spec.obs_dim)?;
        let (c, s, speed) = (state.observation[0], state.observation[1], state.observation[2]);
        if ((c * c + s * s) - 1.0).abs() > 1e-6 {
            return Err(Error::State(format!(
                "(cos, sin) = ({c}, {s}) does not lie on the unit circle"
            )));
        }
        if speed.abs() > MAX_SPEED + 1e-9 {
            return Err(Error::State(format!("speed {speed} exceeds ±{MAX_SPEED}")));
        }
        if state.step_index >= self.spec.horizon {
            return Err(Error::State("snapshot step index is past the horizon".into()));
        }
        self.angle = s.atan2(c);
        self.speed = speed;
        self.step_index = state.step_index;
        self.done = false;
        Ok(())
    }
}
