//! Run orchestration: config parsing, the plan-value training loop, its
//! single-step ablations, and evaluation metrics.
//!
//! One run is: seed the replay buffer with uniform-random warmup steps,
//! then for `epochs` rounds of `steps_per_epoch` environment steps each —
//! retrain the dynamics model at the epoch boundary (for variants that use
//! one), take one policy action in the real environment, branch short model
//! rollouts off replay states (main variant only), apply `critic_updates`
//! critic steps and exactly one policy step, and evaluate the deterministic
//! policy every `eval_interval` environment steps.
//!
//! Every random draw comes from a stream derived from the run seed and a
//! fixed role name, and the loop is single-threaded, so a run is
//! bit-for-bit reproducible: same config, same metrics, same checkpoint.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::actor::{actor_update, alpha_update, ActorPlanner, PlanningActor, Temperature};
use crate::buffer::{SegmentBuffer, Source, Transition, Window};
use crate::ckpt::Checkpoint;
use crate::critic::{critic_update, td_targets, CriticPair, PlanSegment};
use crate::envs::{parse_env, Env};
use crate::error::{Error, Result};
use crate::model::{
    branched_rollout, train_model, Dynamics, EnsembleDynamicsModel, ModelConfig, Policy, StepMode,
};
use crate::rng::{self, Stream};
use crate::sac::SacAgent;

/// Which update rule a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// k-step plan-value critic and planning actor on mixed real and model
    /// segments.
    Mppve,
    /// Plan-value critic and planning actor on real segments only.
    SacMppve,
    /// Single-step critic with model-expanded targets; actor on real states.
    SacMve,
    /// Like [`Variant::SacMve`], but the actor also consumes model states.
    SacMveMpi,
    /// Plain single-step soft actor-critic.
    Sac,
}

impl Variant {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "mppve" => Ok(Variant::Mppve),
            "sac-mppve" => Ok(Variant::SacMppve),
            "sac-mve" => Ok(Variant::SacMve),
            "sac-mve-mpi" => Ok(Variant::SacMveMpi),
            "sac" => Ok(Variant::Sac),
            other => Err(Error::Config(format!(
                "unknown variant {other}; expected mppve, sac-mppve, sac-mve, sac-mve-mpi, or sac"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mppve => "mppve",
            Variant::SacMppve => "sac-mppve",
            Variant::SacMve => "sac-mve",
            Variant::SacMveMpi => "sac-mve-mpi",
            Variant::Sac => "sac",
        }
    }

    /// Whether updates run on the plan-value stack (plan critic, planning
    /// actor) rather than on the single-step agent.
    fn plans(self) -> bool {
        matches!(self, Variant::Mppve | Variant::SacMppve)
    }

    /// Whether the run carries a dynamics model object at all.
    fn has_model(self) -> bool {
        self != Variant::Sac
    }

    /// Whether the model is retrained at epoch boundaries. A plan-value run
    /// without model data skips training at k = 1, where plans never step
    /// the model.
    fn trains_model(self, k: usize) -> bool {
        match self {
            Variant::Mppve | Variant::SacMve | Variant::SacMveMpi => true,
            Variant::SacMppve => k > 1,
            Variant::Sac => false,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Linear ramp for the model rollout length: worth `x` until step `a`,
/// rising to `y` at step `b`, constant after.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutSchedule {
    pub x: usize,
    pub y: usize,
    pub a: usize,
    pub b: usize,
}

/// min(max(x + (t − a)/(b − a)·(y − x), x), y), truncated to an integer.
pub fn rollout_schedule(schedule: &RolloutSchedule, t: usize) -> usize {
    let (x, y) = (schedule.x as f64, schedule.y as f64);
    let frac = (t as f64 - schedule.a as f64) / (schedule.b as f64 - schedule.a as f64);
    (x + frac * (y - x)).clamp(x, y) as usize
}

/// Everything one training run needs, parseable from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub env: String,
    pub variant: Variant,
    pub k: usize,
    pub soft: bool,
    pub alpha: f64,
    pub learn_alpha: bool,
    pub target_entropy: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub model_rollouts: usize,
    pub critic_updates: usize,
    pub start_size: usize,
    pub batch_size: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub polyak: f64,
    pub gamma: f64,
    /// Share of critic windows drawn from the real buffer when model data
    /// exists.
    pub real_fraction: f64,
    pub schedule: RolloutSchedule,
    pub model_members: usize,
    pub model_elites: usize,
    pub model_hidden: Vec<usize>,
    pub model_holdout: f64,
    pub model_epochs: usize,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub env_capacity: usize,
    pub model_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Expansion horizon for the value-expansion variants; defaults to `k`.
    pub mve_horizon: Option<usize>,
    /// Stop as soon as an evaluation reaches this return.
    pub early_stop_return: Option<f64>,
    /// Where to write a checkpoint if the run dies mid-flight.
    pub crash_dump: Option<String>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            env: "pendulum".to_string(),
            variant: Variant::Mppve,
            k: 3,
            soft: true,
            alpha: 0.2,
            learn_alpha: true,
            target_entropy: -1.0,
            epochs: 30,
            steps_per_epoch: 1000,
            model_rollouts: 400,
            critic_updates: 20,
            start_size: 1000,
            batch_size: 256,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            polyak: 0.005,
            gamma: 0.99,
            real_fraction: 0.1,
            schedule: RolloutSchedule { x: 3, y: 5, a: 3000, b: 12000 },
            model_members: 5,
            model_elites: 3,
            model_hidden: vec![32, 32],
            model_holdout: 0.2,
            model_epochs: 25,
            critic_hidden: vec![32, 32],
            actor_hidden: vec![32, 32],
            env_capacity: 100_000,
            model_capacity: 1_000_000,
            eval_interval: 1000,
            eval_episodes: 10,
            mve_horizon: None,
            early_stop_return: None,
            crash_dump: None,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if self.learn_alpha && !self.soft {
            return Err(Error::Config("learn_alpha needs soft updates".into()));
        }
        if self.learn_alpha && self.alpha == 0.0 {
            return Err(Error::Config("a learned temperature must start positive".into()));
        }
        if !self.target_entropy.is_finite() {
            return Err(Error::Config("target_entropy must be finite".into()));
        }
        for (name, value) in [
            ("steps_per_epoch", self.steps_per_epoch),
            ("model_rollouts", self.model_rollouts),
            ("critic_updates", self.critic_updates),
            ("start_size", self.start_size),
            ("batch_size", self.batch_size),
            ("model.members", self.model_members),
            ("model.epochs", self.model_epochs),
            ("env_capacity", self.env_capacity),
            ("model_capacity", self.model_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, value) in [("critic_lr", self.critic_lr), ("actor_lr", self.actor_lr)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config(format!("polyak must lie in (0, 1], got {}", self.polyak)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::Config(format!(
                "real_fraction must lie in [0, 1], got {}",
                self.real_fraction
            )));
        }
        if self.schedule.x == 0 || self.schedule.x > self.schedule.y {
            return Err(Error::Config(format!(
                "schedule lengths need 1 ≤ x ≤ y, got {} and {}",
                self.schedule.x, self.schedule.y
            )));
        }
        if self.schedule.a >= self.schedule.b {
            return Err(Error::Config(format!(
                "schedule steps need a < b, got {} and {}",
                self.schedule.a, self.schedule.b
            )));
        }
        if self.model_elites == 0 || self.model_elites > self.model_members {
            return Err(Error::Config(format!(
                "need 1 ≤ model.elites ≤ model.members, got {}/{}",
                self.model_elites, self.model_members
            )));
        }
        if !(self.model_holdout > 0.0 && self.model_holdout < 1.0) {
            return Err(Error::Config(format!(
                "model.holdout must lie in (0, 1), got {}",
                self.model_holdout
            )));
        }
        if let Some(r) = self.early_stop_return {
            if !r.is_finite() {
                return Err(Error::Config("early_stop_return must be finite".into()));
            }
        }
        Ok(())
    }

    /// Parses a config file; see [`parse_config`].
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        parse_config(&std::fs::read_to_string(path)?)
    }
}

fn parse_int<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key} needs an integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Config(format!("{key} needs a number, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key} needs true or false, got {other:?}"))),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse_int(key, part.trim())).collect()
}

fn apply_key(config: &mut TrainerConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "env" => config.env = value.to_string(),
        "variant" => config.variant = Variant::parse(value)?,
        "k" => config.k = parse_int(key, value)?,
        "soft" => config.soft = parse_bool(key, value)?,
        "alpha" => config.alpha = parse_f64(key, value)?,
        "learn_alpha" => config.learn_alpha = parse_bool(key, value)?,
        "target_entropy" => config.target_entropy = parse_f64(key, value)?,
        "epochs" => config.epochs = parse_int(key, value)?,
        "steps_per_epoch" => config.steps_per_epoch = parse_int(key, value)?,
        "model_rollouts" => config.model_rollouts = parse_int(key, value)?,
        "critic_updates" => config.critic_updates = parse_int(key, value)?,
        "start_size" => config.start_size = parse_int(key, value)?,
        "batch_size" => config.batch_size = parse_int(key, value)?,
        "critic_lr" => config.critic_lr = parse_f64(key, value)?,
        "actor_lr" => config.actor_lr = parse_f64(key, value)?,
        "polyak" => config.polyak = parse_f64(key, value)?,
        "gamma" => config.gamma = parse_f64(key, value)?,
        "real_fraction" => config.real_fraction = parse_f64(key, value)?,
        "schedule.x" => config.schedule.x = parse_int(key, value)?,
        "schedule.y" => config.schedule.y = parse_int(key, value)?,
        "schedule.a" => config.schedule.a = parse_int(key, value)?,
        "schedule.b" => config.schedule.b = parse_int(key, value)?,
        "model.members" => config.model_members = parse_int(key, value)?,
        "model.elites" => config.model_elites = parse_int(key, value)?,
        "model.hidden" => config.model_hidden = parse_usize_list(key, value)?,
        "model.holdout" => config.model_holdout = parse_f64(key, value)?,
        "model.epochs" => config.model_epochs = parse_int(key, value)?,
        "critic.hidden" => config.critic_hidden = parse_usize_list(key, value)?,
        "actor.hidden" => config.actor_hidden = parse_usize_list(key, value)?,
        "env_capacity" => config.env_capacity = parse_int(key, value)?,
        "model_capacity" => config.model_capacity = parse_int(key, value)?,
        "eval_interval" => config.eval_interval = parse_int(key, value)?,
        "eval_episodes" => config.eval_episodes = parse_int(key, value)?,
        "mve_horizon" => config.mve_horizon = Some(parse_int(key, value)?),
        "early_stop_return" => config.early_stop_return = Some(parse_f64(key, value)?),
        "crash_dump" => config.crash_dump = Some(value.to_string()),
        "seed" => config.seed = parse_int(key, value)?,
        other => return Err(Error::Config(format!("unknown config key {other}"))),
    }
    Ok(())
}

/// Parses `key = value` lines into a config. `#` starts a comment, blank
/// lines are skipped, later assignments win, unknown keys are errors.
pub fn parse_config(text: &str) -> Result<TrainerConfig> {
    let mut config = TrainerConfig::default();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at_line = |e: Error| match e {
            Error::Config(msg) => Error::Config(format!("line {}: {msg}", index + 1)),
            other => other,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", index + 1)))?;
        apply_key(&mut config, key.trim(), value.trim()).map_err(at_line)?;
    }
    config.validate()?;
    Ok(config)
}

/// One evaluation point on the metrics curve.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub env_step: usize,
    pub eval_return: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub model_nll: f64,
    pub alpha: f64,
    pub rollout_length: usize,
}

pub const METRICS_HEADER: &str =
    "env_step,eval_return,critic_loss,actor_loss,model_nll,alpha,rollout_length";

/// Renders metrics rows as CSV under [`METRICS_HEADER`].
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.env_step,
            row.eval_return,
            row.critic_loss,
            row.actor_loss,
            row.model_nll,
            row.alpha,
            row.rollout_length
        ));
    }
    out
}

/// Bookkeeping totals for one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunCounts {
    pub env_steps: u64,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub actor_real_states: u64,
    pub actor_model_states: u64,
    pub env_buffer_len: usize,
    pub model_buffer_len: usize,
}

/// What a finished run hands back.
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub counts: RunCounts,
}

/// H-step value-expansion targets: from each transition's successor state,
/// unroll the model `horizon` steps under the current policy, sum the
/// discounted predicted rewards, and bootstrap the target critic (minus the
/// entropy term in soft mode) at the final imagined state. Terminal
/// transitions stop at their reward.
#[allow(clippy::too_many_arguments)]
pub fn mve_targets(
    model: &mut dyn Dynamics,
    agent: &SacAgent,
    batch: &[Transition],
    horizon: usize,
    gamma: f64,
    soft: bool,
    alpha: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Contract("value expansion needs at least one transition".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Contract(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if soft && !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha must be finite and ≥ 0, got {alpha}")));
    }
    let mut targets: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].done).collect();
    if !live.is_empty() {
        let mut cur = Array2::zeros((live.len(), agent.obs_dim()));
        for (row, &i) in live.iter().enumerate() {
            if batch[i].next_observation.len() != agent.obs_dim() {
                return Err(Error::Shape("transition width does not match the agent".into()));
            }
            for (c, &v) in batch[i].next_observation.iter().enumerate() {
                cur[[row, c]] = v;
            }
        }
        let mut disc = gamma;
        for _ in 0..horizon {
            let actions = agent.act_batch(&cur, rng)?;
            let (next, rewards) = model.step_batch(&cur, &actions, rng, StepMode::Sample)?;
            for (row, &i) in live.iter().enumerate() {
                targets[i] += disc * rewards[[row, 0]];
            }
            disc *= gamma;
            cur = next;
        }
        let (boot_actions, log_probs) = agent.sample_infer(&cur, rng)?;
        let q = agent.q_target_min(&cur, &boot_actions)?;
        for (row, &i) in live.iter().enumerate() {
            let mut boot = q[[row, 0]];
            if soft {
                boot -= alpha * log_probs[[row, 0]];
            }
            targets[i] += disc * boot;
        }
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("non-finite expansion target".into()));
    }
    Ok(targets)
}

/// [`mve_targets`] for a single transition.
#[allow(clippy::too_many_arguments)]
pub fn mve_target(
    model: &mut dyn Dynamics,
    agent: &SacAgent,
    transition: &Transition,
    horizon: usize,
    gamma: f64,
    soft: bool,
    alpha: f64,
    rng: &mut Stream,
) -> Result<f64> {
    let ys = mve_targets(
        model,
        agent,
        std::slice::from_ref(transition),
        horizon,
        gamma,
        soft,
        alpha,
        rng,
    )?;
    Ok(ys[0])
}

enum AgentKind {
    Plan { actor: PlanningActor, critic: CriticPair },
    Flat { agent: SacAgent },
}

struct Streams {
    warmup: Stream,
    policy: Stream,
    model_train: Stream,
    rollouts: Stream,
    batches: Stream,
    planner: Stream,
    updates: Stream,
    eval: Stream,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            warmup: rng::derive(seed, "warmup"),
            policy: rng::derive(seed, "policy"),
            model_train: rng::derive(seed, "model-train"),
            rollouts: rng::derive(seed, "rollouts"),
            batches: rng::derive(seed, "batches"),
            planner: rng::derive(seed, "planner"),
            updates: rng::derive(seed, "updates"),
            eval: rng::derive(seed, "eval"),
        }
    }
}

struct RunState {
    env: Box<dyn Env>,
    eval_env: Box<dyn Env>,
    agent: AgentKind,
    model: Option<EnsembleDynamicsModel>,
    env_buffer: SegmentBuffer,
    model_buffer: Option<SegmentBuffer>,
    temperature: Option<Temperature>,
    alpha: f64,
    obs: Vec<f64>,
    counts: RunCounts,
    model_trained: bool,
    last_critic_loss: f64,
    last_actor_loss: f64,
    last_model_nll: f64,
    rollout_len: usize,
}

fn setup(config: &TrainerConfig) -> Result<RunState> {
    let env = parse_env(&config.env)?;
    let eval_env = parse_env(&config.env)?;
    let spec = env.spec().clone();
    // Model parameters draw from their own stream so the agent's
    // initialization does not depend on whether a model exists.
    let model = if config.variant.has_model() {
        let mut model_init = rng::derive(config.seed, "model-init");
        Some(EnsembleDynamicsModel::new(
            spec.obs_dim,
            spec.act_dim,
            ModelConfig {
                n_members: config.model_members,
                n_elites: config.model_elites,
                hidden: config.model_hidden.clone(),
                ..ModelConfig::default()
            },
            &mut model_init,
        )?)
    } else {
        None
    };
    let mut init = rng::derive(config.seed, "init");
    let agent = if config.variant.plans() {
        let actor = PlanningActor::for_env(&spec, config.k, &config.actor_hidden, false, &mut init)?;
        let critic = CriticPair::new(
            spec.obs_dim,
            spec.act_dim,
            config.k,
            &config.critic_hidden,
            config.polyak,
            true,
            &mut init,
        )?;
        AgentKind::Plan { actor, critic }
    } else {
        AgentKind::Flat {
            agent: SacAgent::for_env(
                &spec,
                &config.actor_hidden,
                &config.critic_hidden,
                config.polyak,
                &mut init,
            )?,
        }
    };
    let window_len = if config.variant.plans() { config.k } else { 1 };
    let env_buffer = SegmentBuffer::new(Source::Env, config.env_capacity, window_len)?;
    let model_buffer = if config.variant == Variant::Mppve {
        Some(SegmentBuffer::new(Source::Model, config.model_capacity, config.k)?)
    } else {
        None
    };
    let temperature = if config.soft && config.learn_alpha {
        Some(Temperature::new(config.alpha, config.target_entropy)?)
    } else {
        None
    };
    Ok(RunState {
        env,
        eval_env,
        agent,
        model,
        env_buffer,
        model_buffer,
        temperature,
        alpha: config.alpha,
        obs: Vec::new(),
        counts: RunCounts::default(),
        model_trained: false,
        last_critic_loss: 0.0,
        last_actor_loss: 0.0,
        last_model_nll: 0.0,
        rollout_len: 0,
    })
}

fn uniform_action(low: f64, high: f64, act_dim: usize, rng: &mut Stream) -> Vec<f64> {
    (0..act_dim).map(|_| low + (high - low) * rng.gen::<f64>()).collect()
}

/// Applies one action, stores the transition, and advances `obs` (resetting
/// on episode end).
fn step_and_store(
    env: &mut dyn Env,
    buffer: &mut SegmentBuffer,
    obs: &mut Vec<f64>,
    action: Vec<f64>,
    rng: &mut Stream,
) -> Result<()> {
    let outcome = env.step(&action, rng)?;
    buffer.push(Transition {
        observation: obs.clone(),
        action,
        reward: outcome.reward,
        next_observation: outcome.observation.clone(),
        done: outcome.done,
    })?;
    *obs = if outcome.done { env.reset(rng) } else { outcome.observation };
    Ok(())
}

fn act_one(agent: &AgentKind, obs: &[f64], rng: &mut Stream) -> Result<Vec<f64>> {
    let m = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row shape");
    let actions = match agent {
        AgentKind::Plan { actor, .. } => actor.act_batch(&m, rng)?,
        AgentKind::Flat { agent } => agent.act_batch(&m, rng)?,
    };
    Ok(actions.row(0).to_vec())
}

fn gather_states(buffer: &SegmentBuffer, n: usize, rng: &mut Stream) -> Result<Array2<f64>> {
    let first = buffer.sample_index(rng)?;
    let width = buffer.transition(first).observation.len();
    let mut out = Array2::zeros((n, width));
    let mut fill = |row: usize, index: usize| {
        for (c, &v) in buffer.transition(index).observation.iter().enumerate() {
            out[[row, c]] = v;
        }
    };
    fill(0, first);
    for row in 1..n {
        let index = buffer.sample_index(rng)?;
        fill(row, index);
    }
    Ok(out)
}

fn gather_transitions(
    buffer: &SegmentBuffer,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<Transition>> {
    (0..n).map(|_| Ok(buffer.transition(buffer.sample_index(rng)?).clone())).collect()
}

/// Turns a sampled window into a k-step segment, padding terminal windows
/// with fresh policy actions at the final observation.
fn segment_with_pads(
    window: &Window,
    k: usize,
    actor: &PlanningActor,
    rng: &mut Stream,
) -> Result<PlanSegment> {
    let missing = k - window.actions.len();
    let pads = if missing == 0 {
        Vec::new()
    } else {
        let mut ends = Array2::zeros((missing, window.end.len()));
        for row in 0..missing {
            for (c, &v) in window.end.iter().enumerate() {
                ends[[row, c]] = v;
            }
        }
        let actions = actor.act_batch(&ends, rng)?;
        (0..missing).map(|row| actions.row(row).to_vec()).collect()
    };
    PlanSegment::from_window(window, k, pads)
}

/// Draws one critic batch of k-step segments, mixing model and real windows
/// when a model buffer is present.
fn plan_segment_batch(
    config: &TrainerConfig,
    actor: &PlanningActor,
    env_buffer: &SegmentBuffer,
    model_buffer: Option<&SegmentBuffer>,
    rng: &mut Stream,
) -> Result<Vec<PlanSegment>> {
    let mut segments = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let window = match model_buffer {
            Some(mb) => {
                let u: f64 = rng.gen();
                if u >= config.real_fraction && mb.window_count() > 0 {
                    mb.sample_window(rng)?
                } else {
                    env_buffer.sample_window(rng)?
                }
            }
            None => env_buffer.sample_window(rng)?,
        };
        segments.push(segment_with_pads(&window, config.k, actor, rng)?);
    }
    Ok(segments)
}

fn evaluate(
    agent: &AgentKind,
    env: &mut dyn Env,
    episodes: usize,
    rng: &mut Stream,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        loop {
            let m = Array2::from_shape_vec((1, obs.len()), obs).expect("row shape");
            let action = match agent {
                AgentKind::Plan { actor, .. } => actor.act_mean_batch(&m)?,
                AgentKind::Flat { agent } => agent.act_mean_batch(&m)?,
            };
            let outcome = env.step(&action.row(0).to_vec(), rng)?;
            total += outcome.reward;
            if outcome.done {
                break;
            }
            obs = outcome.observation;
        }
    }
    Ok(total / episodes as f64)
}

fn train_loop(
    config: &TrainerConfig,
    state: &mut RunState,
    streams: &mut Streams,
    metrics: &mut Vec<MetricsRow>,
) -> Result<()> {
    let RunState {
        env,
        eval_env,
        agent,
        model,
        env_buffer,
        model_buffer,
        temperature,
        alpha,
        obs,
        counts,
        model_trained,
        last_critic_loss,
        last_actor_loss,
        last_model_nll,
        rollout_len,
    } = state;
    let (low, high, act_dim) = {
        let spec = env.spec();
        (spec.action_low, spec.action_high, spec.act_dim)
    };

    *obs = env.reset(&mut streams.warmup);
    for _ in 0..config.start_size {
        let action = uniform_action(low, high, act_dim, &mut streams.warmup);
        step_and_store(env.as_mut(), env_buffer, obs, action, &mut streams.warmup)?;
    }

    let mut t = 0usize;
    for _ in 0..config.epochs {
        if config.variant.trains_model(config.k) {
            let m = model.as_mut().expect("model training requires a model");
            let report =
                train_model(m, env_buffer, config.model_holdout, config.model_epochs, &mut streams.model_train)?;
            *last_model_nll = report.elite_holdout_nll();
            *model_trained = true;
            if let Some(mb) = model_buffer {
                mb.clear();
            }
        }
        for _ in 0..config.steps_per_epoch {
            t += 1;
            let action = act_one(agent, obs, &mut streams.policy)?;
            step_and_store(env.as_mut(), env_buffer, obs, action, &mut streams.policy)?;
            counts.env_steps += 1;

            if config.variant == Variant::Mppve {
                *rollout_len = rollout_schedule(&config.schedule, t);
                let m = model.as_mut().expect("this variant carries a model");
                let policy: &dyn Policy = match agent {
                    AgentKind::Plan { actor, .. } => actor,
                    AgentKind::Flat { agent } => agent,
                };
                let branches = branched_rollout(
                    m,
                    policy,
                    env_buffer,
                    config.model_rollouts,
                    *rollout_len,
                    &mut streams.rollouts,
                )?;
                let mb = model_buffer.as_mut().expect("this variant buffers model data");
                for branch in branches {
                    for transition in branch {
                        mb.push(transition)?;
                    }
                    mb.end_episode();
                }
            }

            match agent {
                AgentKind::Plan { actor, critic } => {
                    let m = model.as_mut().expect("plan variants carry a model");
                    for _ in 0..config.critic_updates {
                        let segments = plan_segment_batch(
                            config,
                            actor,
                            env_buffer,
                            model_buffer.as_ref(),
                            &mut streams.batches,
                        )?;
                        let targets = {
                            let mut planner = ActorPlanner::new(actor, m);
                            td_targets(
                                critic,
                                &segments,
                                &mut planner,
                                config.gamma,
                                config.soft,
                                *alpha,
                                &mut streams.planner,
                            )?
                        };
                        *last_critic_loss =
                            critic_update(critic, &segments, &targets, config.critic_lr)?;
                        critic.polyak_update()?;
                        counts.critic_updates += 1;
                    }
                    let states =
                        gather_states(env_buffer, config.batch_size, &mut streams.batches)?;
                    let update = actor_update(
                        actor,
                        m,
                        critic,
                        &states,
                        Source::Env,
                        config.soft,
                        *alpha,
                        config.actor_lr,
                        &mut streams.updates,
                    )?;
                    *last_actor_loss = update.loss;
                    counts.actor_updates += 1;
                    if let Some(temp) = temperature {
                        *alpha =
                            alpha_update(temp, &update.plan_log_probs, config.k, config.actor_lr)?;
                    }
                }
                AgentKind::Flat { agent: sac } => {
                    for _ in 0..config.critic_updates {
                        let batch =
                            gather_transitions(env_buffer, config.batch_size, &mut streams.batches)?;
                        let targets = if config.variant == Variant::Sac {
                            sac.critic_targets(
                                &batch,
                                config.gamma,
                                config.soft,
                                *alpha,
                                &mut streams.planner,
                            )?
                        } else {
                            mve_targets(
                                model.as_mut().expect("value expansion needs a model"),
                                sac,
                                &batch,
                                config.mve_horizon.unwrap_or(config.k),
                                config.gamma,
                                config.soft,
                                *alpha,
                                &mut streams.planner,
                            )?
                        };
                        *last_critic_loss = sac.critic_update(&batch, &targets, config.critic_lr)?;
                        sac.polyak_update()?;
                        counts.critic_updates += 1;
                    }
                    let (states, real_rows) = if config.variant == Variant::SacMveMpi {
                        let n_fake = config.batch_size / 2;
                        let n_real = config.batch_size - n_fake;
                        let real = gather_states(env_buffer, n_real, &mut streams.batches)?;
                        if n_fake == 0 {
                            (real, n_real)
                        } else {
                            let branches = branched_rollout(
                                model.as_mut().expect("value expansion needs a model"),
                                &*sac,
                                env_buffer,
                                n_fake,
                                1,
                                &mut streams.rollouts,
                            )?;
                            let width = real.ncols();
                            let mut states = Array2::zeros((config.batch_size, width));
                            for row in 0..n_real {
                                for c in 0..width {
                                    states[[row, c]] = real[[row, c]];
                                }
                            }
                            for (b, branch) in branches.iter().enumerate() {
                                for (c, &v) in branch[0].next_observation.iter().enumerate() {
                                    states[[n_real + b, c]] = v;
                                }
                            }
                            (states, n_real)
                        }
                    } else {
                        (gather_states(env_buffer, config.batch_size, &mut streams.batches)?, config.batch_size)
                    };
                    let update = sac.actor_update(
                        &states,
                        real_rows,
                        config.soft,
                        *alpha,
                        config.actor_lr,
                        &mut streams.updates,
                    )?;
                    *last_actor_loss = update.loss;
                    counts.actor_updates += 1;
                    if let Some(temp) = temperature {
                        *alpha = alpha_update(temp, &update.log_probs, 1, config.actor_lr)?;
                    }
                }
            }

            if t % config.eval_interval == 0 {
                let eval_return =
                    evaluate(agent, eval_env.as_mut(), config.eval_episodes, &mut streams.eval)?;
                metrics.push(MetricsRow {
                    env_step: t,
                    eval_return,
                    critic_loss: *last_critic_loss,
                    actor_loss: *last_actor_loss,
                    model_nll: *last_model_nll,
                    alpha: *alpha,
                    rollout_length: *rollout_len,
                });
                if let Some(threshold) = config.early_stop_return {
                    if eval_return >= threshold {
                        return Ok(());
                    }
                }
            }
        }
    }
    Ok(())
}

fn make_checkpoint(config: &TrainerConfig, state: &RunState) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_meta("run.variant", config.variant.as_str())?;
    ck.set_meta("run.env", &config.env)?;
    ck.set_meta("run.k", &config.k.to_string())?;
    ck.set_meta("run.gamma", &format!("{:.16e}", config.gamma))?;
    ck.set_meta("run.seed", &config.seed.to_string())?;
    ck.set_meta("run.soft", if config.soft { "true" } else { "false" })?;
    ck.set_meta("run.alpha", &format!("{:.16e}", state.alpha))?;
    ck.set_meta("run.has_model", if state.model.is_some() { "true" } else { "false" })?;
    ck.set_meta("run.model_trained", if state.model_trained { "true" } else { "false" })?;
    match &state.agent {
        AgentKind::Plan { actor, critic } => {
            actor.to_checkpoint(&mut ck, "actor")?;
            critic.to_checkpoint(&mut ck, "critic")?;
        }
        AgentKind::Flat { agent } => agent.to_checkpoint(&mut ck, "agent")?,
    }
    if let Some(model) = &state.model {
        model.to_checkpoint(&mut ck, "model")?;
    }
    if let Some(temperature) = &state.temperature {
        temperature.to_checkpoint(&mut ck, "temperature")?;
    }
    Ok(ck)
}

fn final_counts(state: &RunState) -> RunCounts {
    let mut counts = state.counts;
    counts.env_buffer_len = state.env_buffer.len();
    counts.model_buffer_len = state.model_buffer.as_ref().map_or(0, SegmentBuffer::len);
    match &state.agent {
        AgentKind::Plan { actor, .. } => {
            let c = actor.counters();
            counts.actor_real_states = c.real_states_consumed;
            counts.actor_model_states = c.model_states_consumed;
        }
        AgentKind::Flat { agent } => {
            let c = agent.counters();
            counts.actor_real_states = c.real_states_consumed;
            counts.actor_model_states = c.model_states_consumed;
        }
    }
    counts
}

/// Runs one full training job described by `config`. On error, a checkpoint
/// of the partially trained run is written to `crash_dump` (when set)
/// before the error is returned.
pub fn run(config: &TrainerConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut state = setup(config)?;
    let mut streams = Streams::new(config.seed);
    let mut metrics = Vec::new();
    match train_loop(config, &mut state, &mut streams, &mut metrics) {
        Ok(()) => Ok(RunOutput {
            metrics,
            counts: final_counts(&state),
            checkpoint: make_checkpoint(config, &state)?,
        }),
        Err(e) => {
            if let Some(path) = &config.crash_dump {
                if let Ok(ck) = make_checkpoint(config, &state) {
                    let _ = ck.save(path);
                }
            }
            Err(e)
        }
    }
}

/// The plan-value components of a finished run, reloaded for analysis.
pub struct PlanRun {
    pub actor: PlanningActor,
    pub critic: CriticPair,
    pub model: Option<EnsembleDynamicsModel>,
    pub env: String,
    pub k: usize,
    pub gamma: f64,
    pub soft: bool,
    pub alpha: f64,
    pub model_trained: bool,
    pub seed: u64,
}

fn meta_bool(ck: &Checkpoint, key: &str) -> Result<bool> {
    match ck.require_meta(key)? {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key} holds {other:?}, expected true or false"))),
    }
}

/// Loads the actor, critic, and model from a plan-value run checkpoint.
/// Checkpoints of the single-step variants are rejected.
pub fn load_plan_run(ck: &Checkpoint) -> Result<PlanRun> {
    let variant = Variant::parse(ck.require_meta("run.variant")?)?;
    if !variant.plans() {
        return Err(Error::Config(format!(
            "checkpoint holds a {variant} run, not a plan-value run"
        )));
    }
    let k: usize = ck
        .require_meta("run.k")?
        .parse()
        .map_err(|_| Error::Config("bad integer for run.k".into()))?;
    let gamma: f64 = ck
        .require_meta("run.gamma")?
        .parse()
        .map_err(|_| Error::Config("bad float for run.gamma".into()))?;
    let alpha: f64 = ck
        .require_meta("run.alpha")?
        .parse()
        .map_err(|_| Error::Config("bad float for run.alpha".into()))?;
    let seed: u64 = ck
        .require_meta("run.seed")?
        .parse()
        .map_err(|_| Error::Config("bad integer for run.seed".into()))?;
    let model = if meta_bool(ck, "run.has_model")? {
        Some(EnsembleDynamicsModel::from_checkpoint(ck, "model")?)
    } else {
        None
    };
    Ok(PlanRun {
        actor: PlanningActor::from_checkpoint(ck, "actor")?,
        critic: CriticPair::from_checkpoint(ck, "critic")?,
        model,
        env: ck.require_meta("run.env")?.to_string(),
        k,
        gamma,
        soft: meta_bool(ck, "run.soft")?,
        alpha,
        model_trained: meta_bool(ck, "run.model_trained")?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use crate::envs::MdpEnv;
    use crate::model::TrueDynamicsStub;
    use crate::tabular::TabularMdp;

    use super::*;

    fn tiny_config(variant: Variant, seed: u64) -> TrainerConfig {
        TrainerConfig {
            env: "linchain".to_string(),
            variant,
            k: 2,
            epochs: 2,
            steps_per_epoch: 5,
            model_rollouts: 2,
            critic_updates: 2,
            start_size: 400,
            batch_size: 16,
            real_fraction: 0.5,
            schedule: RolloutSchedule { x: 2, y: 2, a: 1, b: 2 },
            model_members: 2,
            model_elites: 1,
            model_hidden: vec![16],
            model_epochs: 2,
            critic_hidden: vec![16],
            actor_hidden: vec![16],
            env_capacity: 10_000,
            model_capacity: 10_000,
            eval_interval: 5,
            eval_episodes: 1,
            seed,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn the_rollout_schedule_hits_its_documented_endpoints() {
        let ramp = RolloutSchedule { x: 1, y: 4, a: 20_000, b: 50_000 };
        assert_eq!(rollout_schedule(&ramp, 10_000), 1);
        assert_eq!(rollout_schedule(&ramp, 20_000), 1);
        assert_eq!(rollout_schedule(&ramp, 35_000), 2);
        assert_eq!(rollout_schedule(&ramp, 50_000), 4);
        assert_eq!(rollout_schedule(&ramp, 80_000), 4);
        let flat = RolloutSchedule { x: 2, y: 2, a: 5, b: 6 };
        for t in [0, 5, 6, 100] {
            assert_eq!(rollout_schedule(&flat, t), 2);
        }
    }

    #[test]
    fn config_text_round_trips_every_documented_key() {
        let text = "\
# a full config, with noise the parser must shrug off
env = linchain
variant = sac-mve-mpi
k = 4
soft = true
alpha = 0.05        # inline comment
learn_alpha = false
target_entropy = -2.5

epochs = 7
steps_per_epoch = 11
model_rollouts = 13
critic_updates = 3
start_size = 17
batch_size = 19
critic_lr = 1e-3
actor_lr = 2e-3
polyak = 0.01
gamma = 0.95
real_fraction = 0.25
schedule.x = 1
schedule.y = 4
schedule.a = 100
schedule.b = 200
model.members = 3
model.elites = 2
model.hidden = 8,8
model.holdout = 0.3
model.epochs = 4
critic.hidden = 24
actor.hidden =
env_capacity = 500
model_capacity = 600
eval_interval = 10
eval_episodes = 2
mve_horizon = 2
early_stop_return = -5.5
crash_dump = /tmp/dump.ckpt
seed = 99
seed = 123   # later assignments win
";
        let config = parse_config(text).unwrap();
        assert_eq!(config.env, "linchain");
        assert_eq!(config.variant, Variant::SacMveMpi);
        assert_eq!(config.k, 4);
        assert!(config.soft);
        assert_eq!(config.alpha, 0.05);
        assert!(!config.learn_alpha);
        assert_eq!(config.target_entropy, -2.5);
        assert_eq!(config.epochs, 7);
        assert_eq!(config.steps_per_epoch, 11);
        assert_eq!(config.model_rollouts, 13);
        assert_eq!(config.critic_updates, 3);
        assert_eq!(config.start_size, 17);
        assert_eq!(config.batch_size, 19);
        assert_eq!(config.critic_lr, 1e-3);
        assert_eq!(config.actor_lr, 2e-3);
        assert_eq!(config.polyak, 0.01);
        assert_eq!(config.gamma, 0.95);
        assert_eq!(config.real_fraction, 0.25);
        assert_eq!(config.schedule, RolloutSchedule { x: 1, y: 4, a: 100, b: 200 });
        assert_eq!(config.model_members, 3);
        assert_eq!(config.model_elites, 2);
        assert_eq!(config.model_hidden, vec![8, 8]);
        assert_eq!(config.model_holdout, 0.3);
        assert_eq!(config.model_epochs, 4);
        assert_eq!(config.critic_hidden, vec![24]);
        assert_eq!(config.actor_hidden, Vec::<usize>::new());
        assert_eq!(config.env_capacity, 500);
        assert_eq!(config.model_capacity, 600);
        assert_eq!(config.eval_interval, 10);
        assert_eq!(config.eval_episodes, 2);
        assert_eq!(config.mve_horizon, Some(2));
        assert_eq!(config.early_stop_return, Some(-5.5));
        assert_eq!(config.crash_dump.as_deref(), Some("/tmp/dump.ckpt"));
        assert_eq!(config.seed, 123);
    }

    #[test]
    fn malformed_configs_are_rejected_with_line_numbers() {
        let err = parse_config("epochs = 3\nnonsense_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_config("epochs\n").is_err());
        assert!(parse_config("k = three\n").is_err());
        assert!(parse_config("soft = yes\n").is_err());

        let bad = |line: &str| parse_config(line).unwrap_err();
        bad("polyak = 0\n");
        bad("gamma = 1\n");
        bad("real_fraction = 1.5\n");
        bad("schedule.a = 9\nschedule.b = 9\n");
        bad("schedule.x = 5\nschedule.y = 2\n");
        bad("model.members = 2\nmodel.elites = 3\n");
        bad("model.holdout = 1\n");
        bad("critic_lr = 0\n");
        bad("k = 0\n");
        bad("learn_alpha = true\nsoft = false\n");
        bad("alpha = 0\n");
    }

    #[test]
    fn default_desk_settings_are_as_documented() {
        let c = TrainerConfig::default();
        assert_eq!(c.env, "pendulum");
        assert_eq!(c.variant, Variant::Mppve);
        assert_eq!(c.k, 3);
        assert_eq!(c.epochs, 30);
        assert_eq!(c.steps_per_epoch, 1000);
        assert_eq!(c.model_rollouts, 400);
        assert_eq!(c.critic_updates, 20);
        assert_eq!(c.start_size, 1000);
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.env_capacity, 100_000);
        assert_eq!(c.model_capacity, 1_000_000);
        assert!(c.validate().is_ok());
        assert_eq!(Variant::parse("sac-mve-mpi").unwrap(), Variant::SacMveMpi);
        assert_eq!(Variant::Mppve.to_string(), "mppve");
        assert!(Variant::parse("mbpo").is_err());
    }

    #[test]
    fn zero_horizon_expansion_equals_single_step_targets() {
        let mut rng = rng::root(61);
        let agent = SacAgent::new(2, 1, &[8], &[8], -1.0, 1.0, 0.01, &mut rng).unwrap();
        let mut model =
            EnsembleDynamicsModel::new(2, 1, ModelConfig::default(), &mut rng).unwrap();
        let batch: Vec<Transition> = (0..6)
            .map(|i| Transition {
                observation: rng::normal_vec(&mut rng, 2),
                action: vec![rng::normal_vec(&mut rng, 1)[0].tanh()],
                reward: rng::normal_vec(&mut rng, 1)[0],
                next_observation: rng::normal_vec(&mut rng, 2),
                done: i % 3 == 2,
            })
            .collect();
        let expansion = mve_targets(
            &mut model,
            &agent,
            &batch,
            0,
            0.97,
            true,
            0.2,
            &mut rng::root(8),
        )
        .unwrap();
        let single = agent.critic_targets(&batch, 0.97, true, 0.2, &mut rng::root(8)).unwrap();
        assert_eq!(expansion, single);
    }

    #[test]
    fn expansion_targets_match_exhaustive_lookahead_on_the_toggle_chain() {
        let mut rng = rng::root(62);
        let mut agent = SacAgent::new(2, 1, &[], &[16], -1.0, 1.0, 0.01, &mut rng).unwrap();
        // Pin the policy to the toggle action: mean head 5 (tanh ≈ 1, the
        // upper action bin) with log-std at the clamp floor.
        agent
            .pi_store_mut()
            .set_value("pi.w0", Array2::zeros((2, 2)))
            .unwrap();
        agent
            .pi_store_mut()
            .set_value("pi.b0", ndarray::array![[5.0, -20.0]])
            .unwrap();
        let env = MdpEnv::new(TabularMdp::two_state_toggle(), 100).unwrap();
        let mut stub = TrueDynamicsStub::new(Box::new(env));
        let gamma = 0.9;

        // Hand transition: from the rewarding state, toggling pays 1 and
        // lands in the idle state.
        let transition = Transition {
            observation: vec![0.0, 1.0],
            action: vec![0.9],
            reward: 1.0,
            next_observation: vec![1.0, 0.0],
            done: false,
        };
        let y = mve_target(
            &mut stub,
            &agent,
            &transition,
            2,
            gamma,
            false,
            0.0,
            &mut rng::root(9),
        )
        .unwrap();

        // Toggling twice from the idle state visits (idle → rewarding →
        // idle), paying 0 then 1, and bootstraps back at the idle state.
        let idle = ndarray::array![[1.0, 0.0]];
        let boot_action = agent.act_mean_batch(&idle).unwrap();
        let q = agent.q_target_min(&idle, &boot_action).unwrap()[[0, 0]];
        let expected = 1.0 + gamma * 0.0 + gamma * gamma * 1.0 + gamma * gamma * gamma * q;
        assert_abs_diff_eq!(y, expected, epsilon = 1e-6);

        // The scalar form is the first row of the batched form.
        let batch = mve_targets(
            &mut stub,
            &agent,
            std::slice::from_ref(&transition),
            2,
            gamma,
            false,
            0.0,
            &mut rng::root(9),
        )
        .unwrap();
        assert_eq!(y, batch[0]);

        // γ = 0 collapses to the stored reward; so does a terminal row.
        let r0 = mve_target(&mut stub, &agent, &transition, 2, 0.0, false, 0.0, &mut rng::root(9))
            .unwrap();
        assert_eq!(r0, 1.0);
        let mut terminal = transition.clone();
        terminal.done = true;
        let rt = mve_target(&mut stub, &agent, &terminal, 2, gamma, false, 0.0, &mut rng::root(9))
            .unwrap();
        assert_eq!(rt, 1.0);
    }

    #[test]
    fn a_tiny_run_is_deterministic_and_keeps_its_update_ratios() {
        let run_once = || run(&tiny_config(Variant::Mppve, 7)).unwrap();
        let a = run_once();
        let b = run_once();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.checkpoint.to_text(), b.checkpoint.to_text());

        assert_eq!(a.counts.env_steps, 10);
        assert_eq!(a.counts.critic_updates, 20);
        assert_eq!(a.counts.actor_updates, 10);
        assert_eq!(a.counts.actor_real_states, 160);
        assert_eq!(a.counts.actor_model_states, 0);
        assert_eq!(a.counts.env_buffer_len, 410);
        assert_eq!(a.counts.model_buffer_len, 20);

        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.metrics[0].env_step, 5);
        assert_eq!(a.metrics[1].env_step, 10);
        for row in &a.metrics {
            assert_eq!(row.rollout_length, 2);
            assert!(row.model_nll.is_finite() && row.model_nll != 0.0);
            assert!(row.alpha > 0.0);
            assert!(row.eval_return.is_finite());
        }
        let csv = metrics_to_csv(&a.metrics);
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 7);
    }

    #[test]
    fn value_expansion_at_horizon_zero_reproduces_the_plain_baseline() {
        let mut mve = tiny_config(Variant::SacMve, 3);
        mve.mve_horizon = Some(0);
        let sac = tiny_config(Variant::Sac, 3);
        let a = run(&mve).unwrap();
        let b = run(&sac).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.env_step, y.env_step);
            assert_eq!(x.eval_return, y.eval_return);
            assert_eq!(x.critic_loss, y.critic_loss);
            assert_eq!(x.actor_loss, y.actor_loss);
            assert_eq!(x.alpha, y.alpha);
            assert_ne!(x.model_nll, y.model_nll);
        }
        assert_eq!(a.counts.actor_model_states, 0);
        assert_eq!(b.counts.actor_model_states, 0);
    }

    #[test]
    fn only_the_mixed_actor_variant_consumes_model_states() {
        let out = run(&tiny_config(Variant::SacMveMpi, 5)).unwrap();
        assert_eq!(out.counts.actor_real_states, 80);
        assert_eq!(out.counts.actor_model_states, 80);
    }

    #[test]
    fn an_epoch_free_run_only_warms_up() {
        let mut config = tiny_config(Variant::Mppve, 11);
        config.epochs = 0;
        config.start_size = 50;
        let out = run(&config).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.counts.env_steps, 0);
        assert_eq!(out.counts.env_buffer_len, 50);
        let reloaded = load_plan_run(&out.checkpoint).unwrap();
        assert_eq!(reloaded.k, 2);
        assert_eq!(reloaded.env, "linchain");
        assert!(!reloaded.model_trained);
        assert!(reloaded.model.is_some());
        assert_eq!(reloaded.gamma, 0.99);
    }

    #[test]
    fn early_stopping_cuts_the_run_short() {
        let mut config = tiny_config(Variant::Sac, 13);
        config.start_size = 10;
        config.epochs = 1;
        config.steps_per_epoch = 20;
        config.early_stop_return = Some(-1e9);
        let out = run(&config).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.counts.env_steps, 5);
    }

    #[test]
    fn a_crash_leaves_a_checkpoint_behind() {
        let path = std::env::temp_dir().join(format!("crash-{}.ckpt", std::process::id()));
        let mut config = tiny_config(Variant::Mppve, 17);
        config.start_size = 50; // too little to fit a model
        config.crash_dump = Some(path.to_string_lossy().into_owned());
        let err = match run(&config) {
            Err(e) => e,
            Ok(_) => panic!("a run without enough warmup data must fail"),
        };
        assert!(matches!(err, Error::Capacity(_)), "{err}");
        let dumped = Checkpoint::load(&path).unwrap();
        assert_eq!(dumped.meta("run.variant"), Some("mppve"));
        assert_eq!(dumped.meta("run.model_trained"), Some("false"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn flat_checkpoints_are_rejected_by_the_plan_loader() {
        let mut config = tiny_config(Variant::Sac, 19);
        config.epochs = 0;
        config.start_size = 5;
        let out = run(&config).unwrap();
        let err = match load_plan_run(&out.checkpoint) {
            Err(e) => e,
            Ok(_) => panic!("a flat checkpoint must not load as a plan run"),
        };
        assert!(err.to_string().contains("sac"), "{err}");
    }
}
