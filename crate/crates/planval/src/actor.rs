//! Planning actor: the policy that writes k-step plans through the model.
//!
//! A plan starts at a real state s_t and alternates a tanh-Gaussian action
//! with a reparameterized model step, k actions in total:
//!
//!   a_{t+m} = c + s·tanh(μ_φ(s_{t+m}) + σ_φ(s_{t+m})·η_m),
//!   s_{t+m+1} ∼ model(s_{t+m}, a_{t+m}),
//!   log π^k(τ|s_t) = Σ_m log π(a_{t+m}|s_{t+m}).
//!
//! Sampling and differentiation are split: [`PlanningActor::plan_batch`]
//! draws rollouts and records every noise source, and the loss rebuilds the
//! identical computation on a tape from those records, so the pathwise
//! gradient flows through the policy, the model steps, and the critic while
//! the critic itself is only ever evaluated at the real start state.

use ndarray::Array2;

use crate::buffer::Source;
use crate::ckpt::Checkpoint;
use crate::critic::{CriticPair, Planner};
use crate::diff::{
    gaussian_head, gaussian_mean_infer, gaussian_sample_infer, Gradients, Mlp, ParamStore, Tape,
    Var,
};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::model::{join_usizes, split_usizes};
use crate::model::{Dynamics, EnsembleDynamicsModel, Policy, StepMode};
use crate::rng::{self, Stream};

/// One sampled k-step plan with every noise draw that produced it, so the
/// whole rollout can be replayed as a differentiable function of φ.
#[derive(Clone, Debug)]
pub struct PlanRollout {
    start: Vec<f64>,
    actions: Vec<Vec<f64>>,
    imagined: Vec<Vec<f64>>,
    step_log_probs: Vec<f64>,
    plan_log_prob: f64,
    policy_noise: Vec<Vec<f64>>,
    model_members: Vec<usize>,
    model_noise: Vec<Vec<f64>>,
}

impl PlanRollout {
    /// Plan length.
    pub fn k(&self) -> usize {
        self.actions.len()
    }

    /// The real state the plan starts from.
    pub fn start(&self) -> &[f64] {
        &self.start
    }

    /// The k native-unit actions.
    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    /// The k−1 states the model imagined after each step.
    pub fn imagined(&self) -> &[Vec<f64>] {
        &self.imagined
    }

    /// Per-step action log densities.
    pub fn step_log_probs(&self) -> &[f64] {
        &self.step_log_probs
    }

    /// log π^k(τ|s_t), the sum of the step log densities.
    pub fn plan_log_prob(&self) -> f64 {
        self.plan_log_prob
    }

    /// The k policy noise vectors η.
    pub fn policy_noise(&self) -> &[Vec<f64>] {
        &self.policy_noise
    }

    /// Which ensemble member answered each of the k−1 model steps; empty
    /// when the dynamics did not report its draws.
    pub fn model_members(&self) -> &[usize] {
        &self.model_members
    }

    /// Target-space model noise per step, matching `model_members`.
    pub fn model_noise(&self) -> &[Vec<f64>] {
        &self.model_noise
    }

    /// All k actions concatenated into one row of width k·act_dim.
    pub fn flat_plan(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in &self.actions {
            out.extend_from_slice(a);
        }
        out
    }

    /// Whether the model draws were recorded, i.e. the rollout can be
    /// replayed on a tape.
    pub fn replayable(&self) -> bool {
        self.model_members.len() + 1 == self.k()
    }
}

/// Counters proving where gradients and data actually went.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActorCounters {
    /// Critic evaluations at real plan start states.
    pub critic_evals_at_start: u64,
    /// Critic evaluations at imagined states — zero by construction.
    pub critic_evals_at_imagined: u64,
    /// Environment-buffer states consumed by updates.
    pub real_states_consumed: u64,
    /// Model-buffer states consumed by updates — zero by construction.
    pub model_states_consumed: u64,
}

/// Tanh-Gaussian policy head over observations, scaled to native action
/// units, plus the plan machinery built on top of it.
pub struct PlanningActor {
    obs_dim: usize,
    act_dim: usize,
    k: usize,
    hidden: Vec<usize>,
    action_center: f64,
    action_scale: f64,
    mean_propagation: bool,
    net: Mlp,
    store: ParamStore,
    counters: ActorCounters,
}

impl PlanningActor {
    /// Fresh policy; actions land in [low, high] per dimension.
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        k: usize,
        hidden: &[usize],
        action_low: f64,
        action_high: f64,
        mean_propagation: bool,
        rng: &mut Stream,
    ) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Contract("actor needs nonzero state and action widths".into()));
        }
        if k == 0 {
            return Err(Error::Contract("plan length k must be at least 1".into()));
        }
        if !(action_low.is_finite() && action_high.is_finite() && action_low < action_high) {
            return Err(Error::Contract(format!(
                "action bounds [{action_low}, {action_high}] are not a finite interval"
            )));
        }
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * act_dim);
        let mut store = ParamStore::new();
        let net = Mlp::init(&mut store, "pi", &sizes, rng)?;
        Ok(Self {
            obs_dim,
            act_dim,
            k,
            hidden: hidden.to_vec(),
            action_center: 0.5 * (action_low + action_high),
            action_scale: 0.5 * (action_high - action_low),
            mean_propagation,
            net,
            store,
            counters: ActorCounters::default(),
        })
    }

    /// [`PlanningActor::new`] with widths and bounds taken from an env spec.
    pub fn for_env(
        spec: &EnvSpec,
        k: usize,
        hidden: &[usize],
        mean_propagation: bool,
        rng: &mut Stream,
    ) -> Result<Self> {
        Self::new(
            spec.obs_dim,
            spec.act_dim,
            k,
            hidden,
            spec.action_low,
            spec.action_high,
            mean_propagation,
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

    /// Plan length.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Whether model steps propagate the predictive mean instead of a
    /// reparameterized sample.
    pub fn mean_propagation(&self) -> bool {
        self.mean_propagation
    }

    /// Instrumentation counters (not serialized; reset on load).
    pub fn counters(&self) -> ActorCounters {
        self.counters
    }

    /// The policy parameters.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable policy parameters, e.g. for seeding fixtures.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// ln-density shift from mapping the unit tanh box to native units.
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

    /// Stochastic native-unit actions, one row per observation.
    pub fn act_batch(&self, observations: &Array2<f64>, rng: &mut Stream) -> Result<Array2<f64>> {
        self.check_obs(observations)?;
        let head = self.net.infer(&self.store, observations)?;
        let noise = normal_matrix(rng, observations.nrows(), self.act_dim);
        let (squashed, _) = gaussian_sample_infer(&head, &noise)?;
        Ok(squashed.mapv(|v| self.action_center + self.action_scale * v))
    }

    /// Deterministic native-unit actions: scaled tanh of the head mean.
    pub fn act_mean_batch(&self, observations: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_obs(observations)?;
        let head = self.net.infer(&self.store, observations)?;
        let squashed = gaussian_mean_infer(&head)?;
        Ok(squashed.mapv(|v| self.action_center + self.action_scale * v))
    }

    /// Pushes one policy evaluation onto a tape: the native-unit action at
    /// the observation rows already on the tape, driven by the given
    /// standard-normal noise, together with its per-row log density.
    pub fn policy_on_tape(
        &self,
        tape: &mut Tape,
        observations: Var,
        noise: Array2<f64>,
    ) -> Result<(Var, Var)> {
        let (rows, cols) = tape.shape(observations);
        if cols != self.obs_dim || noise.dim() != (rows, self.act_dim) {
            return Err(Error::Shape(format!(
                "policy step wants {rows}×{} observations with {rows}×{} noise",
                self.obs_dim, self.act_dim
            )));
        }
        let head = self.net.forward(tape, &self.store, observations)?;
        let noise = tape.input(noise);
        let sample = gaussian_head(tape, head, noise)?;
        let scaled = tape.scale(sample.action, self.action_scale);
        let action = tape.add_const(scaled, self.action_center);
        let log_prob = tape.add_const(sample.log_prob, -self.log_scale_shift());
        Ok((action, log_prob))
    }

    /// A copy of this policy that plans `k` steps instead. The copy shares
    /// nothing with the original; its counters start at zero.
    pub fn with_plan_length(&self, k: usize) -> Result<PlanningActor> {
        if k == 0 {
            return Err(Error::Contract("plan length k must be at least 1".into()));
        }
        Ok(PlanningActor {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            k,
            hidden: self.hidden.clone(),
            action_center: self.action_center,
            action_scale: self.action_scale,
            mean_propagation: self.mean_propagation,
            net: self.net.clone(),
            store: self.store.clone(),
            counters: ActorCounters::default(),
        })
    }

    /// Samples one k-step plan per start state through `dynamics`.
    pub fn plan_batch(
        &self,
        dynamics: &mut dyn Dynamics,
        starts: &Array2<f64>,
        rng: &mut Stream,
    ) -> Result<Vec<PlanRollout>> {
        self.plan_batch_with(dynamics, starts, rng, false)
    }

    /// [`PlanningActor::plan_batch`] with an option to zero the policy
    /// noise, giving the mean action at every step.
    pub fn plan_batch_with(
        &self,
        dynamics: &mut dyn Dynamics,
        starts: &Array2<f64>,
        rng: &mut Stream,
        deterministic: bool,
    ) -> Result<Vec<PlanRollout>> {
        self.check_obs(starts)?;
        let n = starts.nrows();
        let mode = if self.mean_propagation { StepMode::Mean } else { StepMode::Sample };
        let mut s = starts.to_owned();
        let mut actions = Vec::with_capacity(self.k);
        let mut noises = Vec::with_capacity(self.k);
        let mut log_probs = Vec::with_capacity(self.k);
        let mut imagined = Vec::with_capacity(self.k - 1);
        let mut draws = Vec::with_capacity(self.k - 1);
        for m in 0..self.k {
            let head = self.net.infer(&self.store, &s)?;
            let noise = if deterministic {
                Array2::zeros((n, self.act_dim))
            } else {
                normal_matrix(rng, n, self.act_dim)
            };
            let (squashed, log_prob) = gaussian_sample_infer(&head, &noise)?;
            let action = squashed.mapv(|v| self.action_center + self.action_scale * v);
            let log_prob = log_prob.mapv(|v| v - self.log_scale_shift());
            if m + 1 < self.k {
                let (next, _rewards, draw) =
                    dynamics.step_batch_recorded(&s, &action, rng, mode)?;
                imagined.push(next.clone());
                draws.push(draw);
                s = next;
            }
            actions.push(action);
            noises.push(noise);
            log_probs.push(log_prob);
        }

        let recorded = draws.iter().all(Option::is_some);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let step_log_probs: Vec<f64> = log_probs.iter().map(|l| l[[i, 0]]).collect();
            let plan_log_prob = step_log_probs.iter().sum();
            let (mut model_members, mut model_noise) = (Vec::new(), Vec::new());
            if recorded {
                for draw in draws.iter().flatten() {
                    model_members.push(draw.members[i]);
                    model_noise.push(draw.noise.row(i).to_vec());
                }
            }
            out.push(PlanRollout {
                start: starts.row(i).to_vec(),
                actions: actions.iter().map(|a| a.row(i).to_vec()).collect(),
                imagined: imagined.iter().map(|s| s.row(i).to_vec()).collect(),
                step_log_probs,
                plan_log_prob,
                policy_noise: noises.iter().map(|e| e.row(i).to_vec()).collect(),
                model_members,
                model_noise,
            });
        }
        Ok(out)
    }

    /// Serializes architecture, bounds, and parameters under `prefix`.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let key = |name: &str| format!("{prefix}.{name}");
        ck.set_meta(&key("obs_dim"), &self.obs_dim.to_string())?;
        ck.set_meta(&key("act_dim"), &self.act_dim.to_string())?;
        ck.set_meta(&key("k"), &self.k.to_string())?;
        ck.set_meta(&key("hidden"), &join_usizes(&self.hidden))?;
        ck.set_meta(&key("action_center"), &format!("{:.16e}", self.action_center))?;
        ck.set_meta(&key("action_scale"), &format!("{:.16e}", self.action_scale))?;
        ck.set_meta(
            &key("mean_propagation"),
            if self.mean_propagation { "true" } else { "false" },
        )?;
        ck.put_store(&key("params"), &self.store)?;
        Ok(())
    }

    /// Rebuilds an actor written by [`PlanningActor::to_checkpoint`].
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
        let k = usize_meta("k")?;
        let hidden = split_usizes(ck.require_meta(&key("hidden"))?)?;
        let action_center = f64_meta("action_center")?;
        let action_scale = f64_meta("action_scale")?;
        if !(action_scale > 0.0 && action_scale.is_finite() && action_center.is_finite()) {
            return Err(Error::Config("bad action bounds in checkpoint".into()));
        }
        let mean_propagation = match ck.require_meta(&key("mean_propagation"))? {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Config(format!(
                    "bad mean_propagation flag '{other}' in checkpoint"
                )))
            }
        };
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(&hidden);
        sizes.push(2 * act_dim);
        Ok(Self {
            obs_dim,
            act_dim,
            k,
            hidden,
            action_center,
            action_scale,
            mean_propagation,
            net: Mlp::bind("pi", &sizes)?,
            store: ck.get_store(&key("params"))?,
            counters: ActorCounters::default(),
        })
    }
}

impl Policy for PlanningActor {
    fn act_batch(&self, observations: &Array2<f64>, rng: &mut Stream) -> Result<Array2<f64>> {
        PlanningActor::act_batch(self, observations, rng)
    }
}

/// An actor/model pair viewed as the critic's plan source.
pub struct ActorPlanner<'a> {
    actor: &'a PlanningActor,
    model: &'a mut EnsembleDynamicsModel,
}

impl<'a> ActorPlanner<'a> {
    pub fn new(actor: &'a PlanningActor, model: &'a mut EnsembleDynamicsModel) -> Self {
        Self { actor, model }
    }
}

impl Planner for ActorPlanner<'_> {
    fn plan_batch(
        &mut self,
        states: &Array2<f64>,
        rng: &mut Stream,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let rollouts = self.actor.plan_batch(&mut *self.model, states, rng)?;
        let width = self.actor.k() * self.actor.act_dim();
        let mut plans = Array2::zeros((rollouts.len(), width));
        let mut log_probs = Vec::with_capacity(rollouts.len());
        for (i, rollout) in rollouts.iter().enumerate() {
            for (c, v) in rollout.flat_plan().into_iter().enumerate() {
                plans[[i, c]] = v;
            }
            log_probs.push(rollout.plan_log_prob());
        }
        Ok((plans, log_probs))
    }
}

fn normal_matrix(rng: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), rng::normal_vec(rng, rows * cols))
        .expect("noise matrix construction")
}

fn stack_rows(rows: Vec<&[f64]>, width: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Shape(format!(
                "row {i} has width {}, expected {width}",
                row.len()
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            out[[i, c]] = v;
        }
    }
    Ok(out)
}

/// Replays the rollouts on a tape and returns the loss with gradients for
/// every bound parameter (policy, model, and critic — callers keep what
/// their optimizer owns).
///
/// The loss is mean(−Q_ψ(s_t, τ) + α·log π^k(τ|s_t)), the entropy term
/// present only in soft mode; the critic is evaluated once, at the real
/// start states.
pub fn actor_loss_grads(
    actor: &PlanningActor,
    model: &EnsembleDynamicsModel,
    critic: &CriticPair,
    rollouts: &[PlanRollout],
    soft: bool,
    alpha: f64,
) -> Result<(f64, Gradients)> {
    if rollouts.is_empty() {
        return Err(Error::Contract("actor loss needs at least one rollout".into()));
    }
    if soft && !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha must be finite and ≥ 0, got {alpha}")));
    }
    let k = actor.k();
    if critic.k() != k || critic.obs_dim() != actor.obs_dim() || critic.act_dim() != actor.act_dim()
    {
        return Err(Error::Shape("critic widths do not match the actor".into()));
    }
    if k > 1 && (model.obs_dim() != actor.obs_dim() || model.act_dim() != actor.act_dim()) {
        return Err(Error::Shape("model widths do not match the actor".into()));
    }
    for rollout in rollouts {
        if rollout.k() != k || rollout.start().len() != actor.obs_dim() {
            return Err(Error::Shape("rollout does not match the actor's shape".into()));
        }
        if !rollout.replayable() {
            return Err(Error::Contract(
                "rollout carries no model draws, so it cannot be replayed".into(),
            ));
        }
    }

    let n = rollouts.len();
    let mut tape = Tape::new();
    let starts = stack_rows(rollouts.iter().map(|r| r.start()).collect(), actor.obs_dim())?;
    let s0 = tape.input(starts);
    let mut s = s0;
    let mut plan: Option<Var> = None;
    let mut log_prob_sum: Option<Var> = None;
    for m in 0..k {
        let noise = stack_rows(
            rollouts.iter().map(|r| r.policy_noise()[m].as_slice()).collect(),
            actor.act_dim(),
        )?;
        let (action, log_prob) = actor.policy_on_tape(&mut tape, s, noise)?;
        plan = Some(match plan {
            None => action,
            Some(prev) => tape.concat_cols(prev, action)?,
        });
        log_prob_sum = Some(match log_prob_sum {
            None => log_prob,
            Some(prev) => tape.add(prev, log_prob)?,
        });
        if m + 1 < k {
            let members: Vec<usize> = rollouts.iter().map(|r| r.model_members()[m]).collect();
            let noise = stack_rows(
                rollouts.iter().map(|r| r.model_noise()[m].as_slice()).collect(),
                model.target_dim(),
            )?;
            let (next, _rewards) = model.step_on_tape(&mut tape, s, action, &members, &noise)?;
            s = next;
        }
    }
    let q = critic.q_on_tape(&mut tape, s0, plan.expect("k ≥ 1"))?;
    let neg_q = tape.scale(q, -1.0);
    let per_row = if soft {
        let entropy_term = tape.scale(log_prob_sum.expect("k ≥ 1"), alpha);
        tape.add(neg_q, entropy_term)?
    } else {
        neg_q
    };
    let loss = tape.mean_all(per_row);
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite actor loss over {n} rollouts")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// The loss alone.
pub fn actor_loss(
    actor: &PlanningActor,
    model: &EnsembleDynamicsModel,
    critic: &CriticPair,
    rollouts: &[PlanRollout],
    soft: bool,
    alpha: f64,
) -> Result<f64> {
    actor_loss_grads(actor, model, critic, rollouts, soft, alpha).map(|(value, _)| value)
}

/// What one actor update produced.
#[derive(Debug)]
pub struct ActorUpdate {
    /// Pre-step loss.
    pub loss: f64,
    /// log π^k of each fresh plan, for temperature adjustment.
    pub plan_log_probs: Vec<f64>,
}

/// Plans from the given real states and takes one Adam step on the policy
/// parameters only. States tagged as model-generated are refused.
pub fn actor_update(
    actor: &mut PlanningActor,
    model: &mut EnsembleDynamicsModel,
    critic: &CriticPair,
    states: &Array2<f64>,
    source: Source,
    soft: bool,
    alpha: f64,
    learning_rate: f64,
    rng: &mut Stream,
) -> Result<ActorUpdate> {
    if source == Source::Model {
        return Err(Error::Contract(
            "the actor trains on real states only, but the batch is model-generated".into(),
        ));
    }
    let rollouts = actor.plan_batch(model, states, rng)?;
    let (loss, mut grads) = actor_loss_grads(actor, model, critic, &rollouts, soft, alpha)?;
    grads.retain_prefix("pi.");
    actor.store.adam_step(&grads, learning_rate)?;
    actor.counters.real_states_consumed += states.nrows() as u64;
    actor.counters.critic_evals_at_start += states.nrows() as u64;
    Ok(ActorUpdate {
        loss,
        plan_log_probs: rollouts.iter().map(PlanRollout::plan_log_prob).collect(),
    })
}

/// Learnable entropy temperature α = exp(log_alpha).
pub struct Temperature {
    store: ParamStore,
    target_entropy: f64,
}

impl Temperature {
    /// Starts at the given α > 0 with a per-action-step entropy target.
    pub fn new(alpha: f64, target_entropy: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
        }
        if !target_entropy.is_finite() {
            return Err(Error::Contract("target entropy must be finite".into()));
        }
        let mut store = ParamStore::new();
        store.insert("log_alpha", Array2::from_elem((1, 1), alpha.ln()))?;
        Ok(Self { store, target_entropy })
    }

    /// Current temperature.
    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }

    /// Current log temperature.
    pub fn log_alpha(&self) -> f64 {
        self.store.get("log_alpha").expect("log_alpha present")[[0, 0]]
    }

    /// The per-step entropy target.
    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    /// Serializes the temperature under `prefix`.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.set_meta(
            &format!("{prefix}.target_entropy"),
            &format!("{:.16e}", self.target_entropy),
        )?;
        ck.put_store(&format!("{prefix}.params"), &self.store)?;
        Ok(())
    }

    /// Rebuilds a temperature written by [`Temperature::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let target_entropy = ck
            .require_meta(&format!("{prefix}.target_entropy"))?
            .parse::<f64>()
            .map_err(|_| Error::Config("bad target entropy in checkpoint".into()))?;
        if !target_entropy.is_finite() {
            return Err(Error::Config("non-finite target entropy in checkpoint".into()));
        }
        let store = ck.get_store(&format!("{prefix}.params"))?;
        store.get("log_alpha")?;
        Ok(Self { store, target_entropy })
    }
}

/// One Adam step on log_alpha toward matching the mean per-step entropy
/// (−plan log-prob ÷ k) to the target; returns the new α.
///
/// The objective is −log_alpha · mean(log π^k/k + target), so α falls when
/// entropy sits above the target and rises when it sits below.
pub fn alpha_update(
    temperature: &mut Temperature,
    plan_log_probs: &[f64],
    k: usize,
    learning_rate: f64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("plan length k must be at least 1".into()));
    }
    if plan_log_probs.is_empty() {
        return Err(Error::Contract("temperature update needs at least one log-prob".into()));
    }
    if plan_log_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite plan log-prob".into()));
    }
    let coeff = plan_log_probs
        .iter()
        .map(|lp| lp / k as f64 + temperature.target_entropy)
        .sum::<f64>()
        / plan_log_probs.len() as f64;
    let mut tape = Tape::new();
    let log_alpha = tape.param(&temperature.store, "log_alpha")?;
    let loss = tape.scale(log_alpha, -coeff);
    let grads = tape.backward(loss)?;
    temperature.store.adam_step(&grads, learning_rate)?;
    Ok(temperature.alpha())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    use crate::diff::finite_diff_check;
    use crate::envs::{Env, MdpEnv};
    use crate::model::{ModelConfig, Normalization, TrueDynamicsStub};
    use crate::tabular::{plan_distribution, TabularMdp, TabularPolicy};

    use super::*;

    /// A random ensemble marked trained (identity normalization, all
    /// members elite) so stepping works without a fitting run.
    fn marked_model(
        obs_dim: usize,
        act_dim: usize,
        n_members: usize,
        rng: &mut Stream,
    ) -> EnsembleDynamicsModel {
        let config = ModelConfig {
            n_members,
            n_elites: n_members,
            hidden: vec![8],
            ..ModelConfig::default()
        };
        let mut model = EnsembleDynamicsModel::new(obs_dim, act_dim, config, rng).unwrap();
        model
            .set_normalization(Normalization::identity(obs_dim + act_dim, obs_dim + 1))
            .unwrap();
        model.set_elites((0..n_members).collect()).unwrap();
        model
    }

    fn copy_store(store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for name in store.names() {
            out.insert(name, store.get(name).unwrap().clone()).unwrap();
        }
        out
    }

    fn random_starts(n: usize, obs_dim: usize, rng: &mut Stream) -> Array2<f64> {
        Array2::from_shape_vec((n, obs_dim), rng::normal_vec(rng, n * obs_dim)).unwrap()
    }

    #[test]
    fn a_single_step_plan_is_just_the_squashed_action() {
        let mut rng = rng::root(21);
        let actor = PlanningActor::new(3, 2, 1, &[16], -2.0, 2.0, false, &mut rng).unwrap();
        // k = 1 never touches the dynamics, so an untrained ensemble is fine.
        let mut model = EnsembleDynamicsModel::new(3, 2, ModelConfig::default(), &mut rng).unwrap();
        let starts = random_starts(4, 3, &mut rng);
        let rollouts = actor.plan_batch(&mut model, &starts, &mut rng).unwrap();

        assert_eq!(rollouts.len(), 4);
        for (i, rollout) in rollouts.iter().enumerate() {
            assert_eq!(rollout.k(), 1);
            assert!(rollout.imagined().is_empty());
            assert!(rollout.replayable());

            let obs = starts.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let head = actor.net.infer(&actor.store, &obs).unwrap();
            let noise = stack_rows(vec![rollout.policy_noise()[0].as_slice()], 2).unwrap();
            let (squashed, log_prob) = gaussian_sample_infer(&head, &noise).unwrap();
            for d in 0..2 {
                assert_abs_diff_eq!(
                    rollout.actions()[0][d],
                    2.0 * squashed[[0, d]],
                    epsilon = 1e-15
                );
            }
            assert_abs_diff_eq!(
                rollout.plan_log_prob(),
                log_prob[[0, 0]] - 2.0 * 2.0f64.ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn plan_log_probs_add_up() {
        let mut rng = rng::root(22);
        let actor = PlanningActor::new(2, 1, 3, &[16], -1.0, 1.0, false, &mut rng).unwrap();
        let mut model = marked_model(2, 1, 2, &mut rng);
        let starts = random_starts(6, 2, &mut rng);
        for rollout in actor.plan_batch(&mut model, &starts, &mut rng).unwrap() {
            assert_eq!(rollout.step_log_probs().len(), 3);
            let sum: f64 = rollout.step_log_probs().iter().sum();
            assert_abs_diff_eq!(rollout.plan_log_prob(), sum, epsilon = 1e-12);
            assert_eq!(rollout.imagined().len(), 2);
            assert_eq!(rollout.model_members().len(), 2);
            assert_eq!(rollout.model_noise().len(), 2);
        }
    }

    #[test]
    fn zero_noise_planning_is_deterministic_mean_propagation() {
        let mut rng = rng::root(23);
        let actor = PlanningActor::new(2, 1, 2, &[8], -1.0, 1.0, true, &mut rng).unwrap();
        let mut model = marked_model(2, 1, 1, &mut rng);
        let starts = random_starts(3, 2, &mut rng);

        let a = actor
            .plan_batch_with(&mut model, &starts, &mut rng::root(1), true)
            .unwrap();
        let b = actor
            .plan_batch_with(&mut model, &starts, &mut rng::root(2), true)
            .unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.actions(), rb.actions());
            assert_eq!(ra.imagined(), rb.imagined());
            assert!(ra.model_noise().iter().flatten().all(|&v| v == 0.0));
        }

        let mean_action = actor.act_mean_batch(&starts).unwrap();
        for (i, rollout) in a.iter().enumerate() {
            assert_abs_diff_eq!(
                rollout.actions()[0][0],
                mean_action[[i, 0]],
                epsilon = 1e-15
            );
        }
        let first_actions = stack_rows(a.iter().map(|r| r.actions()[0].as_slice()).collect(), 1).unwrap();
        let (next, _) = model
            .step_with(&starts, &first_actions, &[0, 0, 0], &Array2::zeros((3, 3)))
            .unwrap();
        for (i, rollout) in a.iter().enumerate() {
            for c in 0..2 {
                assert_abs_diff_eq!(rollout.imagined()[0][c], next[[i, c]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn stub_plans_follow_the_tabular_path() {
        let mdp = TabularMdp::two_state_toggle();
        let mut rng = rng::root(24);
        let env = MdpEnv::new(mdp.clone(), 100).unwrap();
        let actor =
            PlanningActor::for_env(env.spec(), 3, &[16], false, &mut rng).unwrap();

        // The deterministic tabular shadow of the actor's mean action.
        let mut chosen = Vec::new();
        for s in 0..2 {
            let mut obs = Array2::zeros((1, 2));
            obs[[0, s]] = 1.0;
            let a = actor.act_mean_batch(&obs).unwrap()[[0, 0]];
            chosen.push(env.action_index(a));
        }
        let shadow = TabularPolicy::deterministic(2, 2, &chosen).unwrap();
        let dist = plan_distribution(&mdp, &shadow, 0, 3).unwrap();
        let expected: Vec<Vec<usize>> = dist
            .support()
            .into_iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(plan, _)| plan)
            .collect();
        assert_eq!(expected.len(), 1);

        let mut stub = TrueDynamicsStub::new(Box::new(env));
        let start = array![[1.0, 0.0]];
        let rollouts = actor
            .plan_batch_with(&mut stub, &start, &mut rng, true)
            .unwrap();
        let binned: Vec<usize> = rollouts[0]
            .actions()
            .iter()
            .map(|a| {
                let n = 2.0;
                (((a[0] + 1.0) / 2.0 * n).floor() as isize).clamp(0, 1) as usize
            })
            .collect();
        assert_eq!(binned, expected[0]);

        // Imagined states must walk the tabular path.
        let mut x = 0usize;
        for (step, &a) in binned.iter().enumerate() {
            if step + 1 == 3 {
                break;
            }
            let row = mdp.transition_row(x, a);
            x = row.iter().position(|&p| p > 0.5).unwrap();
            let mut expected_obs = vec![0.0, 0.0];
            expected_obs[x] = 1.0;
            assert_eq!(rollouts[0].imagined()[step], expected_obs);
        }

        assert!(!rollouts[0].replayable());
    }

    #[test]
    fn replaying_a_rollout_reproduces_its_plan_value() {
        let mut rng = rng::root(25);
        let actor = PlanningActor::new(3, 2, 2, &[16], -2.0, 2.0, false, &mut rng).unwrap();
        let mut model = marked_model(3, 2, 2, &mut rng);
        let critic = CriticPair::new(3, 2, 2, &[16], 0.01, false, &mut rng).unwrap();
        let starts = random_starts(8, 3, &mut rng);
        let rollouts = actor.plan_batch(&mut model, &starts, &mut rng).unwrap();

        let plans = stack_rows(
            rollouts.iter().map(|r| r.flat_plan()).collect::<Vec<_>>().iter().map(|p| p.as_slice()).collect(),
            4,
        )
        .unwrap();
        let q = critic.q_online(&starts, &plans).unwrap();
        let by_hand_vanilla = -q.column(0).sum() / 8.0;
        let loss = actor_loss(&actor, &model, &critic, &rollouts, false, 0.0).unwrap();
        assert_abs_diff_eq!(loss, by_hand_vanilla, epsilon = 1e-12);

        let alpha = 0.3;
        let mean_log_prob: f64 =
            rollouts.iter().map(PlanRollout::plan_log_prob).sum::<f64>() / 8.0;
        let soft = actor_loss(&actor, &model, &critic, &rollouts, true, alpha).unwrap();
        assert_abs_diff_eq!(soft, by_hand_vanilla + alpha * mean_log_prob, epsilon = 1e-12);
    }

    #[test]
    fn one_step_soft_losses_match_an_independent_sac_computation() {
        let mut rng = rng::root(26);
        let actor = PlanningActor::new(2, 1, 1, &[16], -2.0, 2.0, false, &mut rng).unwrap();
        let model = EnsembleDynamicsModel::new(2, 1, ModelConfig::default(), &mut rng).unwrap();
        let critic = CriticPair::new(2, 1, 1, &[16], 0.01, false, &mut rng).unwrap();
        let starts = random_starts(16, 2, &mut rng);
        let mut throwaway = EnsembleDynamicsModel::new(2, 1, ModelConfig::default(), &mut rng).unwrap();
        let rollouts = actor.plan_batch(&mut throwaway, &starts, &mut rng).unwrap();
        let alpha = 0.2;

        // Independent single-step SAC path: squash, scale, score, average.
        let head = actor.net.infer(&actor.store, &starts).unwrap();
        let noise = stack_rows(
            rollouts.iter().map(|r| r.policy_noise()[0].as_slice()).collect(),
            1,
        )
        .unwrap();
        let (squashed, log_prob) = gaussian_sample_infer(&head, &noise).unwrap();
        let action = squashed.mapv(|v| 2.0 * v);
        let q = critic.q_online(&starts, &action).unwrap();
        let mut expected = 0.0;
        for i in 0..16 {
            expected += -q[[i, 0]] + alpha * (log_prob[[i, 0]] - 2.0f64.ln());
        }
        expected /= 16.0;

        let loss = actor_loss(&actor, &model, &critic, &rollouts, true, alpha).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn a_constant_critic_gives_a_zero_policy_gradient() {
        let mut rng = rng::root(27);
        let actor = PlanningActor::new(2, 1, 2, &[8], -1.0, 1.0, false, &mut rng).unwrap();
        let mut model = marked_model(2, 1, 2, &mut rng);
        let mut critic = CriticPair::new(2, 1, 2, &[], 0.01, false, &mut rng).unwrap();
        critic
            .online_store_mut()
            .set_value("q1.w0", Array2::zeros((4, 1)))
            .unwrap();
        critic
            .online_store_mut()
            .set_value("q1.b0", array![[1.7]])
            .unwrap();

        let starts = random_starts(6, 2, &mut rng);
        let rollouts = actor.plan_batch(&mut model, &starts, &mut rng).unwrap();
        let (loss, grads) = actor_loss_grads(&actor, &model, &critic, &rollouts, false, 0.0).unwrap();
        assert_abs_diff_eq!(loss, -1.7, epsilon = 1e-12);
        for name in actor.store().names() {
            let g = grads.param(name).unwrap();
            assert!(g.iter().all(|&v| v == 0.0), "nonzero gradient in {name}");
        }
    }

    #[test]
    fn actor_gradients_agree_with_finite_differences() {
        let mut rng = rng::root(28);
        let actor = PlanningActor::new(3, 2, 3, &[8], -2.0, 2.0, false, &mut rng).unwrap();
        let mut model = marked_model(3, 2, 2, &mut rng);
        let critic = CriticPair::new(3, 2, 3, &[8], 0.01, false, &mut rng).unwrap();
        let starts = random_starts(5, 3, &mut rng);
        let rollouts = actor.plan_batch(&mut model, &starts, &mut rng).unwrap();

        let PlanningActor {
            obs_dim,
            act_dim,
            k,
            hidden,
            action_center,
            action_scale,
            mean_propagation,
            mut store,
            ..
        } = actor;
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(2 * act_dim))
            .collect();
        let worst = finite_diff_check(&mut store, 1e-5, 60, &mut rng, |probed| {
            let shadow = PlanningActor {
                obs_dim,
                act_dim,
                k,
                hidden: hidden.clone(),
                action_center,
                action_scale,
                mean_propagation,
                net: Mlp::bind("pi", &sizes).unwrap(),
                store: copy_store(probed),
                counters: ActorCounters::default(),
            };
            actor_loss_grads(&shadow, &model, &critic, &rollouts, true, 0.3)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn updates_touch_only_policy_parameters_and_are_deterministic() {
        let run = || {
            let mut rng = rng::root(29);
            let mut actor =
                PlanningActor::new(2, 1, 2, &[16], -1.0, 1.0, false, &mut rng).unwrap();
            let mut model = marked_model(2, 1, 2, &mut rng);
            let critic = CriticPair::new(2, 1, 2, &[16], 0.01, false, &mut rng).unwrap();
            let model_before = model.member_store(0).snapshot_values();
            let critic_before = critic.online_store().snapshot_values();
            for _ in 0..2 {
                let states = random_starts(8, 2, &mut rng);
                let update = actor_update(
                    &mut actor,
                    &mut model,
                    &critic,
                    &states,
                    Source::Env,
                    true,
                    0.2,
                    1e-3,
                    &mut rng,
                )
                .unwrap();
                assert!(update.loss.is_finite());
                assert_eq!(update.plan_log_probs.len(), 8);
            }
            assert_eq!(model.member_store(0).snapshot_values(), model_before);
            assert_eq!(critic.online_store().snapshot_values(), critic_before);
            assert_eq!(actor.counters().real_states_consumed, 16);
            assert_eq!(actor.counters().critic_evals_at_start, 16);
            assert_eq!(actor.counters().critic_evals_at_imagined, 0);
            assert_eq!(actor.counters().model_states_consumed, 0);
            assert_eq!(actor.store().step(), 2);
            actor.store().snapshot_values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn model_tagged_states_are_refused() {
        let mut rng = rng::root(30);
        let mut actor = PlanningActor::new(2, 1, 2, &[8], -1.0, 1.0, false, &mut rng).unwrap();
        let mut model = marked_model(2, 1, 1, &mut rng);
        let critic = CriticPair::new(2, 1, 2, &[8], 0.01, false, &mut rng).unwrap();
        let states = random_starts(4, 2, &mut rng);
        let before = actor.store().snapshot_values();

        let err = actor_update(
            &mut actor,
            &mut model,
            &critic,
            &states,
            Source::Model,
            false,
            0.0,
            1e-3,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(actor.store().snapshot_values(), before);
        assert_eq!(actor.counters(), ActorCounters::default());
    }

    #[test]
    fn an_update_on_a_frozen_critic_does_not_decrease_plan_value() {
        let mut improvements = Vec::new();
        for seed in 0..10 {
            let mut rng = rng::root(3100 + seed);
            let mut actor =
                PlanningActor::new(2, 1, 2, &[16], -1.0, 1.0, false, &mut rng).unwrap();
            let mut model = marked_model(2, 1, 2, &mut rng);
            let critic = CriticPair::new(2, 1, 2, &[16], 0.01, false, &mut rng).unwrap();
            let mut starts = Array2::zeros((64, 2));
            for i in 0..64 {
                starts[[i, rng.gen_range(0..2)]] = 1.0;
            }

            let mean_plan_value = |actor: &PlanningActor,
                                   model: &mut EnsembleDynamicsModel,
                                   probe: &mut Stream| {
                let rollouts = actor.plan_batch(model, &starts, probe).unwrap();
                let plans: Vec<Vec<f64>> =
                    rollouts.iter().map(PlanRollout::flat_plan).collect();
                let plans =
                    stack_rows(plans.iter().map(Vec::as_slice).collect(), 2).unwrap();
                critic.q_online(&starts, &plans).unwrap().column(0).sum() / 64.0
            };

            let probe_seed = 7000 + seed;
            let before = mean_plan_value(&actor, &mut model, &mut rng::root(probe_seed));
            actor_update(
                &mut actor,
                &mut model,
                &critic,
                &starts,
                Source::Env,
                false,
                0.0,
                1e-3,
                &mut rng,
            )
            .unwrap();
            let after = mean_plan_value(&actor, &mut model, &mut rng::root(probe_seed));
            improvements.push(after - before);
        }
        let mean: f64 = improvements.iter().sum::<f64>() / improvements.len() as f64;
        assert!(mean > 0.0, "mean plan-value change {mean} over {improvements:?}");
    }

    #[test]
    fn temperature_updates_track_the_entropy_target() {
        let mut temp = Temperature::new(0.5, -1.0).unwrap();
        // Mean per-step entropy exactly on target: zero gradient, α frozen.
        let alpha = alpha_update(&mut temp, &[2.0, 2.0], 2, 1e-2).unwrap();
        assert_eq!(alpha, 0.5);

        // Entropy above target (very negative log-probs): α must fall.
        let mut temp = Temperature::new(0.5, -1.0).unwrap();
        let falling = alpha_update(&mut temp, &[-8.0, -6.0], 2, 1e-2).unwrap();
        assert!(falling < 0.5);

        // Entropy below target: α must rise.
        let mut temp = Temperature::new(0.5, -1.0).unwrap();
        let rising = alpha_update(&mut temp, &[6.0, 8.0], 2, 1e-2).unwrap();
        assert!(rising > 0.5);

        assert!(Temperature::new(0.0, -1.0).is_err());
        assert!(Temperature::new(-0.4, -1.0).is_err());
        let mut temp = Temperature::new(0.5, -1.0).unwrap();
        assert!(alpha_update(&mut temp, &[], 1, 1e-2).is_err());
        assert!(alpha_update(&mut temp, &[f64::NAN], 1, 1e-2).is_err());
    }

    #[test]
    fn the_temperature_loop_settles_at_the_entropy_target() {
        let mut rng = rng::root(32);
        let mut actor = PlanningActor::new(1, 1, 1, &[16], -1.0, 1.0, false, &mut rng).unwrap();
        let mut model = EnsembleDynamicsModel::new(1, 1, ModelConfig::default(), &mut rng).unwrap();
        // Hand-built bowl: Q(s, a) = −|a − 0.3|.
        let mut critic = CriticPair::new(1, 1, 1, &[2], 0.01, false, &mut rng).unwrap();
        let c = 0.3;
        critic.online_store_mut().set_value("q1.w0", array![[0.0, 0.0], [1.0, -1.0]]).unwrap();
        critic.online_store_mut().set_value("q1.b0", array![[-c, c]]).unwrap();
        critic.online_store_mut().set_value("q1.w1", array![[-1.0], [-1.0]]).unwrap();
        critic.online_store_mut().set_value("q1.b1", array![[0.0]]).unwrap();

        let target = -0.5;
        let mut temp = Temperature::new(0.2, target).unwrap();
        let starts = Array2::zeros((128, 1));
        let mut tail = Vec::new();
        for iter in 0..4000 {
            let update = actor_update(
                &mut actor,
                &mut model,
                &critic,
                &starts,
                Source::Env,
                true,
                temp.alpha(),
                3e-3,
                &mut rng,
            )
            .unwrap();
            alpha_update(&mut temp, &update.plan_log_probs, 1, 3e-3).unwrap();
            if iter >= 3950 {
                let mean_entropy = -update.plan_log_probs.iter().sum::<f64>() / 128.0;
                tail.push(mean_entropy);
            }
        }
        let settled = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            (settled - target).abs() < 0.1,
            "settled entropy {settled} vs target {target}"
        );
    }

    #[test]
    fn checkpoints_round_trip_actor_and_temperature() {
        let mut rng = rng::root(33);
        let actor = PlanningActor::new(3, 2, 2, &[8, 8], -2.0, 2.0, true, &mut rng).unwrap();
        let temp = Temperature::new(0.7, -3.0).unwrap();
        let mut ck = Checkpoint::new();
        actor.to_checkpoint(&mut ck, "actor").unwrap();
        temp.to_checkpoint(&mut ck, "temperature").unwrap();

        let reloaded = Checkpoint::from_text(&ck.to_text()).unwrap();
        let actor2 = PlanningActor::from_checkpoint(&reloaded, "actor").unwrap();
        let temp2 = Temperature::from_checkpoint(&reloaded, "temperature").unwrap();

        assert_eq!(actor2.k(), 2);
        assert!(actor2.mean_propagation());
        let obs = random_starts(5, 3, &mut rng);
        assert_eq!(
            actor.act_mean_batch(&obs).unwrap(),
            actor2.act_mean_batch(&obs).unwrap()
        );
        assert_eq!(temp2.alpha(), temp.alpha());
        assert_eq!(temp2.target_entropy(), -3.0);
    }

    #[test]
    fn shape_and_state_contracts_hold() {
        let mut rng = rng::root(34);
        assert!(PlanningActor::new(0, 1, 2, &[8], -1.0, 1.0, false, &mut rng).is_err());
        assert!(PlanningActor::new(2, 1, 0, &[8], -1.0, 1.0, false, &mut rng).is_err());
        assert!(PlanningActor::new(2, 1, 2, &[8], 1.0, -1.0, false, &mut rng).is_err());
        assert!(PlanningActor::new(2, 1, 2, &[8], 0.0, f64::INFINITY, false, &mut rng).is_err());

        let actor = PlanningActor::new(2, 1, 2, &[8], -1.0, 1.0, false, &mut rng).unwrap();
        let mut untrained =
            EnsembleDynamicsModel::new(2, 1, ModelConfig::default(), &mut rng).unwrap();
        let starts = random_starts(3, 2, &mut rng);
        // k ≥ 2 needs a working model behind the plan.
        assert!(actor.plan_batch(&mut untrained, &starts, &mut rng).is_err());

        let mut model = marked_model(2, 1, 1, &mut rng);
        let bad = Array2::from_elem((2, 2), f64::NAN);
        assert!(actor.plan_batch(&mut model, &bad, &mut rng).is_err());
        assert!(actor
            .plan_batch(&mut model, &random_starts(2, 3, &mut rng), &mut rng)
            .is_err());

        // Rollouts without recorded model draws cannot be differentiated.
        let env = MdpEnv::new(TabularMdp::two_state_toggle(), 100).unwrap();
        let mut stub = TrueDynamicsStub::new(Box::new(env));
        let critic = CriticPair::new(2, 1, 2, &[8], 0.01, false, &mut rng).unwrap();
        let hot = array![[1.0, 0.0], [0.0, 1.0]];
        let stub_rollouts = actor.plan_batch(&mut stub, &hot, &mut rng).unwrap();
        let err = actor_loss(&actor, &model, &critic, &stub_rollouts, false, 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        // Mismatched critic plan length.
        let short = CriticPair::new(2, 1, 1, &[8], 0.01, false, &mut rng).unwrap();
        let rollouts = actor.plan_batch(&mut model, &hot, &mut rng).unwrap();
        assert!(actor_loss(&actor, &model, &short, &rollouts, false, 0.0).is_err());
        assert!(actor_loss(&actor, &model, &critic, &[], false, 0.0).is_err());
        assert!(actor_loss(&actor, &model, &critic, &rollouts, true, -0.1).is_err());
    }
}
