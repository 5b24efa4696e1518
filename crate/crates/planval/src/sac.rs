//! Plain soft actor-critic, coded as its own single-step implementation so
//! the plan-value machinery has an independent reference to reduce to at
//! k = 1.
//!
//! Twin Q networks with polyak-averaged targets and a tanh-Gaussian policy;
//! critic targets take the usual soft form
//!
//!   y = r + γ·(1 − d)·[min_i Q⁻_i(s', a') − α·log π(a'|s')],  a' ∼ π(·|s').
//!
//! The pathwise policy loss follows the first Q head (the minimum enters
//! through the targets only), the same convention the plan-value actor
//! uses. The scalar numeric kernels — the tanh log-density correction and
//! the log-std clamp bounds — are shared with the diff module, so
//! cross-checks against the plan-value path compare estimation logic
//! rather than floating-point rounding.

use ndarray::{s, Array2};

use crate::buffer::{Source, Transition};
use crate::ckpt::Checkpoint;
use crate::diff::{tanh_sq_corr, Mlp, ParamStore, Tape, HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::model::{join_usizes, split_usizes, Policy};
use crate::rng::{self, Stream};

/// Where the actor's training states came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SacCounters {
    /// Environment-buffer states consumed by policy updates.
    pub real_states_consumed: u64,
    /// Model-generated states consumed by policy updates.
    pub model_states_consumed: u64,
}

/// What one policy update produced.
#[derive(Debug)]
pub struct SacActorUpdate {
    /// Pre-step loss.
    pub loss: f64,
    /// log π of each sampled action, for temperature adjustment.
    pub log_probs: Vec<f64>,
}

/// A self-contained single-step SAC agent.
pub struct SacAgent {
    obs_dim: usize,
    act_dim: usize,
    pi_hidden: Vec<usize>,
    q_hidden: Vec<usize>,
    action_center: f64,
    action_scale: f64,
    pi: Mlp,
    pi_store: ParamStore,
    q1: Mlp,
    q2: Mlp,
    online: ParamStore,
    target: ParamStore,
    polyak: f64,
    counters: SacCounters,
}

impl SacAgent {
    /// Fresh agent with actions in [low, high] per dimension.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        pi_hidden: &[usize],
        q_hidden: &[usize],
        action_low: f64,
        action_high: f64,
        polyak: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Contract("agent needs nonzero state and action widths".into()));
        }
        if !(action_low.is_finite() && action_high.is_finite() && action_low < action_high) {
            return Err(Error::Contract(format!(
                "action bounds [{action_low}, {action_high}] are not a finite interval"
            )));
        }
        if !(polyak > 0.0 && polyak <= 1.0) {
            return Err(Error::Contract(format!("polyak rate must lie in (0, 1], got {polyak}")));
        }
        let mut pi_sizes = vec![obs_dim];
        pi_sizes.extend_from_slice(pi_hidden);
        pi_sizes.push(2 * act_dim);
        let mut q_sizes = vec![obs_dim + act_dim];
        q_sizes.extend_from_slice(q_hidden);
        q_sizes.push(1);

        let mut pi_store = ParamStore::new();
        let pi = Mlp::init(&mut pi_store, "pi", &pi_sizes, rng)?;
        let mut online = ParamStore::new();
        let q1 = Mlp::init(&mut online, "q1", &q_sizes, rng)?;
        let q2 = Mlp::init(&mut online, "q2", &q_sizes, rng)?;
        let mut target = ParamStore::new();
        for name in online.names() {
            target.insert(name, online.get(name)?.clone())?;
        }
        Ok(Self {
            obs_dim,
            act_dim,
            pi_hidden: pi_hidden.to_vec(),
            q_hidden: q_hidden.to_vec(),
            action_center: 0.5 * (action_low + action_high),
            action_scale: 0.5 * (action_high - action_low),
            pi,
            pi_store,
            q1,
            q2,
            online,
            target,
            polyak,
            counters: SacCounters::default(),
        })
    }

    /// [`SacAgent::new`] with widths and bounds taken from an env spec.
    pub fn for_env(
        spec: &EnvSpec,
        pi_hidden: &[usize],
        q_hidden: &[usize],
        polyak: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        Self::new(
            spec.obs_dim,
            spec.act_dim,
            pi_hidden,
            q_hidden,
            spec.action_low,
            spec.action_high,
            polyak,
            rng,
        )
    }

    /// Observation width.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Action width.
    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Instrumentation counters (not serialized; reset on load).
    pub fn counters(&self) -> SacCounters {
        self.counters
    }

    /// Policy parameters.
    pub fn pi_store(&self) -> &ParamStore {
        &self.pi_store
    }

    /// Mutable policy parameters, e.g. for aligning cross-check fixtures.
    pub fn pi_store_mut(&mut self) -> &mut ParamStore {
        &mut self.pi_store
    }

    /// Online critic parameters.
    pub fn online_store(&self) -> &ParamStore {
        &self.online
    }

    /// Mutable online critic parameters.
    pub fn online_store_mut(&mut self) -> &mut ParamStore {
        &mut self.online
    }

    /// Target critic parameters.
    pub fn target_store(&self) -> &ParamStore {
        &self.target
    }

    /// Mutable target critic parameters.
    pub fn target_store_mut(&mut self) -> &mut ParamStore {
        &mut self.target
    }

    fn log_scale_shift(&self) -> f64 {
        self.act_dim as f64 * self.action_scale.ln()
    }

    fn check_obs(&self, observations: &Array2<f64>) -> Result<()> {
        if observations.nrows() == 0 || observations.ncols() != self.obs_dim {
            return Err(Error::Shape(format!(
                "expected n×{} observations, got {}×{}",
                self.obs_dim,
                observations.nrows(),
                observations.ncols()
            )));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite observation".into()));
        }
        Ok(())
    }

    /// Reparameterized sample in native units with its per-row log density.
    pub fn sample_infer(
        &self,
        observations: &Array2<f64>,
        rng: &mut Stream,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_obs(observations)?;
        let head = self.pi.infer(&self.pi_store, observations)?;
        let n = observations.nrows();
        let d = self.act_dim;
        let noise =
            Array2::from_shape_vec((n, d), rng::normal_vec(rng, n * d)).expect("noise shape");
        let mut actions = Array2::zeros((n, d));
        let mut log_probs = Array2::zeros((n, 1));
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..d {
                let mu = head[[i, j]];
                let ls = head[[i, d + j]].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let eps = noise[[i, j]];
                let u = mu + ls.exp() * eps;
                lp += -ls - HALF_LN_2PI - 0.5 * eps * eps - tanh_sq_corr(u);
                actions[[i, j]] = self.action_center + self.action_scale * u.tanh();
            }
            log_probs[[i, 0]] = lp - self.log_scale_shift();
        }
        Ok((actions, log_probs))
    }

    /// Deterministic native-unit actions: scaled tanh of the head mean.
    pub fn act_mean_batch(&self, observations: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_obs(observations)?;
        let head = self.pi.infer(&self.pi_store, observations)?;
        let mean = head.slice(s![.., ..self.act_dim]);
        Ok(mean.mapv(|v| self.action_center + self.action_scale * v.tanh()))
    }

    /// Stochastic native-unit actions.
    pub fn act_batch(&self, observations: &Array2<f64>, rng: &mut Stream) -> Result<Array2<f64>> {
        Ok(self.sample_infer(observations, rng)?.0)
    }

    fn q_input(&self, observations: &Array2<f64>, actions: &Array2<f64>) -> Result<Array2<f64>> {
        if actions.nrows() != observations.nrows() || actions.ncols() != self.act_dim {
            return Err(Error::Shape(format!(
                "expected {}×{} actions, got {}×{}",
                observations.nrows(),
                self.act_dim,
                actions.nrows(),
                actions.ncols()
            )));
        }
        let n = observations.nrows();
        let mut x = Array2::zeros((n, self.obs_dim + self.act_dim));
        x.slice_mut(s![.., ..self.obs_dim]).assign(observations);
        x.slice_mut(s![.., self.obs_dim..]).assign(actions);
        Ok(x)
    }

    fn q_min(
        &self,
        store: &ParamStore,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let x = self.q_input(observations, actions)?;
        let mut q = self.q1.infer(store, &x)?;
        let other = self.q2.infer(store, &x)?;
        q.zip_mut_with(&other, |p, &v| *p = p.min(v));
        Ok(q)
    }

    /// min over target heads.
    pub fn q_target_min(
        &self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.q_min(&self.target, observations, actions)
    }

    /// min over online heads.
    pub fn q_online_min(
        &self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.q_min(&self.online, observations, actions)
    }

    /// Soft one-step TD targets; terminal rows stop at their reward.
    pub fn critic_targets(
        &self,
        batch: &[Transition],
        gamma: f64,
        soft: bool,
        alpha: f64,
        rng: &mut Stream,
    ) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Contract("critic targets need at least one transition".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Contract(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if soft && !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Contract(format!("alpha must be finite and ≥ 0, got {alpha}")));
        }
        let mut targets: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let boot_rows: Vec<usize> =
            (0..batch.len()).filter(|&i| !batch[i].done).collect();
        if !boot_rows.is_empty() {
            let mut ends = Array2::zeros((boot_rows.len(), self.obs_dim));
            for (row, &i) in boot_rows.iter().enumerate() {
                if batch[i].next_observation.len() != self.obs_dim {
                    return Err(Error::Shape("transition width does not match the agent".into()));
                }
                for (c, &v) in batch[i].next_observation.iter().enumerate() {
                    ends[[row, c]] = v;
                }
            }
            let (next_actions, log_probs) = self.sample_infer(&ends, rng)?;
            let q = self.q_target_min(&ends, &next_actions)?;
            for (row, &i) in boot_rows.iter().enumerate() {
                let mut boot = q[[row, 0]];
                if soft {
                    boot -= alpha * log_probs[[row, 0]];
                }
                targets[i] += gamma * boot;
            }
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::Numeric("non-finite critic target".into()));
        }
        Ok(targets)
    }

    /// One Adam step on both online heads against the given targets;
    /// returns the pre-step loss Σ_i ½·mean((Q_i − y)²).
    pub fn critic_update(
        &mut self,
        batch: &[Transition],
        targets: &[f64],
        learning_rate: f64,
    ) -> Result<f64> {
        if batch.is_empty() || batch.len() != targets.len() {
            return Err(Error::Contract(format!(
                "need matching nonempty batch and targets, got {} and {}",
                batch.len(),
                targets.len()
            )));
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::Numeric("non-finite critic target".into()));
        }
        let n = batch.len();
        let mut obs = Array2::zeros((n, self.obs_dim));
        let mut act = Array2::zeros((n, self.act_dim));
        for (i, t) in batch.iter().enumerate() {
            if t.observation.len() != self.obs_dim || t.action.len() != self.act_dim {
                return Err(Error::Shape("transition width does not match the agent".into()));
            }
            for (c, &v) in t.observation.iter().enumerate() {
                obs[[i, c]] = v;
            }
            for (c, &v) in t.action.iter().enumerate() {
                act[[i, c]] = v;
            }
        }
        let x = self.q_input(&obs, &act)?;
        let y = Array2::from_shape_vec((n, 1), targets.to_vec()).expect("target shape");

        let mut tape = Tape::new();
        let xv = tape.input(x);
        let yv = tape.input(y);
        let mut loss: Option<crate::diff::Var> = None;
        for net in [&self.q1, &self.q2] {
            let q = net.forward(&mut tape, &self.online, xv)?;
            let d = tape.sub(q, yv)?;
            let sq = tape.mul(d, d)?;
            let half = tape.scale(sq, 0.5);
            let mean = tape.mean_all(half);
            loss = Some(match loss {
                None => mean,
                Some(prev) => tape.add(prev, mean)?,
            });
        }
        let loss = loss.expect("two heads");
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite critic loss".into()));
        }
        let grads = tape.backward(loss)?;
        self.online.adam_step(&grads, learning_rate)?;
        Ok(value)
    }

    /// One Adam step on the policy: loss = mean(−Q₁(s, a_φ) + α·log π)
    /// with the entropy term present only in soft mode. The first
    /// `real_rows` rows of `states` count as environment data, the rest as
    /// model data.
    pub fn actor_update(
        &mut self,
        states: &Array2<f64>,
        real_rows: usize,
        soft: bool,
        alpha: f64,
        learning_rate: f64,
        rng: &mut Stream,
    ) -> Result<SacActorUpdate> {
        self.check_obs(states)?;
        if real_rows > states.nrows() {
            return Err(Error::Contract(format!(
                "{real_rows} real rows claimed in a batch of {}",
                states.nrows()
            )));
        }
        if soft && !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Contract(format!("alpha must be finite and ≥ 0, got {alpha}")));
        }
        let n = states.nrows();
        let d = self.act_dim;
        let noise =
            Array2::from_shape_vec((n, d), rng::normal_vec(rng, n * d)).expect("noise shape");

        let mut tape = Tape::new();
        let sv = tape.input(states.to_owned());
        let head = self.pi.forward(&mut tape, &self.pi_store, sv)?;
        let nv = tape.input(noise);
        let mean = tape.slice_cols(head, 0, d)?;
        let raw = tape.slice_cols(head, d, 2 * d)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
        let std = tape.exp(log_std);
        let scaled_noise = tape.mul(std, nv)?;
        let pre = tape.add(mean, scaled_noise)?;
        let squashed = tape.tanh(pre);
        let n2 = tape.mul(nv, nv)?;
        let half_n2 = tape.scale(n2, 0.5);
        let corr = tape.tanh_sq_corr(pre);
        let neg_ls = tape.scale(log_std, -1.0);
        let t = tape.add_const(neg_ls, -HALF_LN_2PI);
        let t = tape.sub(t, half_n2)?;
        let t = tape.sub(t, corr)?;
        let log_prob_sq = tape.sum_rows(t);

        let scaled_action = tape.scale(squashed, self.action_scale);
        let action = tape.add_const(scaled_action, self.action_center);
        let log_prob = tape.add_const(log_prob_sq, -self.log_scale_shift());
        let x = tape.concat_cols(sv, action)?;
        let q = self.q1.forward(&mut tape, &self.online, x)?;
        let neg_q = tape.scale(q, -1.0);
        let per_row = if soft {
            let entropy_term = tape.scale(log_prob, alpha);
            tape.add(neg_q, entropy_term)?
        } else {
            neg_q
        };
        let loss = tape.mean_all(per_row);
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite policy loss".into()));
        }
        let log_probs = tape.value(log_prob).column(0).to_vec();
        let mut grads = tape.backward(loss)?;
        grads.retain_prefix("pi.");
        self.pi_store.adam_step(&grads, learning_rate)?;
        self.counters.real_states_consumed += real_rows as u64;
        self.counters.model_states_consumed += (n - real_rows) as u64;
        Ok(SacActorUpdate { loss: value, log_probs })
    }

    /// ψ⁻ ← ψ⁻ + τ·(ψ − ψ⁻) on every critic parameter.
    pub fn polyak_update(&mut self) -> Result<()> {
        let names: Vec<String> = self.online.names().map(str::to_string).collect();
        for name in &names {
            let next = {
                let o = self.online.get(name)?;
                if self.polyak == 1.0 {
                    o.clone()
                } else {
                    let t = self.target.get(name)?;
                    t + &((o - t) * self.polyak)
                }
            };
            self.target.set_value(name, next)?;
        }
        Ok(())
    }

    /// Serializes architecture, bounds, and all three stores under `prefix`.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let key = |name: &str| format!("{prefix}.{name}");
        ck.set_meta(&key("obs_dim"), &self.obs_dim.to_string())?;
        ck.set_meta(&key("act_dim"), &self.act_dim.to_string())?;
        ck.set_meta(&key("pi_hidden"), &join_usizes(&self.pi_hidden))?;
        ck.set_meta(&key("q_hidden"), &join_usizes(&self.q_hidden))?;
        ck.set_meta(&key("action_center"), &format!("{:.16e}", self.action_center))?;
        ck.set_meta(&key("action_scale"), &format!("{:.16e}", self.action_scale))?;
        ck.set_meta(&key("polyak"), &format!("{:.16e}", self.polyak))?;
        ck.put_store(&key("pi"), &self.pi_store)?;
        ck.put_store(&key("online"), &self.online)?;
        ck.put_store(&key("target"), &self.target)?;
        Ok(())
    }

    /// Rebuilds an agent written by [`SacAgent::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let key = |name: &str| format!("{prefix}.{name}");
        let usize_meta = |name: &str| -> Result<usize> {
            ck.require_meta(&key(name))?
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer for {}", key(name))))
        };
        let f64_meta = |name: &str| -> Result<f64> {
            ck.require_meta(&key(name))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad float for {}", key(name))))
        };
        let obs_dim = usize_meta("obs_dim")?;
        let act_dim = usize_meta("act_dim")?;
        let pi_hidden = split_usizes(ck.require_meta(&key("pi_hidden"))?)?;
        let q_hidden = split_usizes(ck.require_meta(&key("q_hidden"))?)?;
        let action_center = f64_meta("action_center")?;
        let action_scale = f64_meta("action_scale")?;
        let polyak = f64_meta("polyak")?;
        if !(action_scale > 0.0 && action_scale.is_finite() && action_center.is_finite()) {
            return Err(Error::Config("bad action bounds in checkpoint".into()));
        }
        if !(polyak > 0.0 && polyak <= 1.0) {
            return Err(Error::Config("bad polyak rate in checkpoint".into()));
        }
        let mut pi_sizes = vec![obs_dim];
        pi_sizes.extend_from_slice(&pi_hidden);
        pi_sizes.push(2 * act_dim);
        let mut q_sizes = vec![obs_dim + act_dim];
        q_sizes.extend_from_slice(&q_hidden);
        q_sizes.push(1);
        Ok(Self {
            obs_dim,
            act_dim,
            pi_hidden,
            q_hidden,
            action_center,
            action_scale,
            pi: Mlp::bind("pi", &pi_sizes)?,
            pi_store: ck.get_store(&key("pi"))?,
            q1: Mlp::bind("q1", &q_sizes)?,
            q2: Mlp::bind("q2", &q_sizes)?,
            online: ck.get_store(&key("online"))?,
            target: ck.get_store(&key("target"))?,
            polyak,
            counters: SacCounters::default(),
        })
    }
}

impl Policy for SacAgent {
    fn act_batch(&self, observations: &Array2<f64>, rng: &mut Stream) -> Result<Array2<f64>> {
        SacAgent::act_batch(self, observations, rng)
    }
}

/// Marks source provenance for a states batch sampled for `actor_update`.
pub fn real_rows_for(source: Source, n: usize) -> usize {
    match source {
        Source::Env => n,
        Source::Model => 0,
    }
}
