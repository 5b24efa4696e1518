//! Post-hoc studies over frozen runs: how well model-based policy
//! gradients point where the real dynamics say they should, and how far
//! critic estimates sit from Monte-Carlo plan values.
//!
//! The gradient study raccess pattern is deliberately asymmetric: a plan
//! update differentiates one plan value at the real start state, while a
//! stepwise update averages single-step value gradients taken at every
//! state a rollout visits. Both are replayed twice — once along the real
//! trajectory, once along the model's — with shared policy noise, and
//! intermediate states entering as fixed inputs, so the only difference
//! between the two gradients of a pair is where the rollouts went.
//! Rollouts propagate the dynamics' mean, keeping sampling noise out of
//! the comparison.

use ndarray::Array2;

use crate::actor::{ActorPlanner, PlanningActor};
use crate::critic::{td_targets, CriticPair, PlanSegment};
use crate::diff::{Gradients, Tape};
use crate::envs::{Env, EnvState};
use crate::error::{Error, Result};
use crate::model::{Dynamics, EnsembleDynamicsModel, StepMode};
use crate::rng::{self, Stream};

/// Cosine similarity mapped onto [0, 1]: (1 + ⟨g,h⟩/(‖g‖‖h‖))/2. Equal
/// directions score 1, opposite directions 0, orthogonal ones 1/2.
pub fn normalized_cosine(g: &[f64], h: &[f64]) -> Result<f64> {
    if g.len() != h.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            g.len(),
            h.len()
        )));
    }
    if g.iter().chain(h).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient entry".into()));
    }
    let dot: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
    let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nh = h.iter().map(|a| a * a).sum::<f64>().sqrt();
    if ng == 0.0 || nh == 0.0 {
        return Err(Error::Degenerate("a zero gradient has no direction".into()));
    }
    Ok((1.0 + (dot / (ng * nh)).clamp(-1.0, 1.0)) / 2.0)
}

/// Per-bin fraction of rows whose agreement score falls below `threshold`,
/// binned by rollout error over `edges` (half-open bins, the last closed).
/// Bins no row lands in are `None` rather than zero; rows outside the
/// edges are ignored.
pub fn severe_error_ratio(
    errors: &[f64],
    scores: &[f64],
    edges: &[f64],
    threshold: f64,
) -> Result<Vec<Option<f64>>> {
    if errors.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} errors against {} scores",
            errors.len(),
            scores.len()
        )));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("bin edges must be at least two, strictly increasing".into()));
    }
    if edges.iter().any(|e| !e.is_finite()) || !threshold.is_finite() {
        return Err(Error::Contract("bin edges and threshold must be finite".into()));
    }
    let n_bins = edges.len() - 1;
    let mut total = vec![0usize; n_bins];
    let mut severe = vec![0usize; n_bins];
    for (&e, &s) in errors.iter().zip(scores) {
        let bin = if e == edges[n_bins] {
            Some(n_bins - 1)
        } else {
            (0..n_bins).find(|&b| edges[b] <= e && e < edges[b + 1])
        };
        if let Some(b) = bin {
            total[b] += 1;
            if s < threshold {
                severe[b] += 1;
            }
        }
    }
    Ok(total
        .iter()
        .zip(&severe)
        .map(|(&t, &s)| (t > 0).then(|| s as f64 / t as f64))
        .collect())
}

/// Wraps dynamics and perturbs every predicted next observation with
/// zero-mean Gaussian noise of scale `sigma`, simulating a model whose
/// error magnitude is under experimental control. Rewards pass through.
pub struct NoisyDynamics<D> {
    inner: D,
    sigma: f64,
}

impl<D: Dynamics> NoisyDynamics<D> {
    pub fn new(inner: D, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise scale must be finite and ≥ 0, got {sigma}"
            )));
        }
        Ok(Self { inner, sigma })
    }
}

impl<D: Dynamics> Dynamics for NoisyDynamics<D> {
    fn step_batch(
        &mut self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mut next, rewards) = self.inner.step_batch(observations, actions, rng, mode)?;
        if self.sigma > 0.0 {
            for v in next.iter_mut() {
                *v += self.sigma * rng::standard_normal(rng);
            }
        }
        Ok((next, rewards))
    }
}

/// One start state's verdict in the gradient-direction study.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStudyRow {
    pub state_id: usize,
    /// Mean Euclidean distance between the model's states and the real
    /// ones over the k rollout steps.
    pub rollout_error: f64,
    /// Agreement of the plan-value gradient taken at the start state.
    pub ncs_plan: f64,
    /// Agreement of the averaged single-step gradients along the rollout.
    pub ncs_step: f64,
}

pub const GRAD_CSV_HEADER: &str = "state_id,rollout_error,ncs_plan,ncs_step";

/// Renders gradient-study rows as CSV under [`GRAD_CSV_HEADER`].
pub fn grad_rows_to_csv(rows: &[GradStudyRow]) -> String {
    let mut out = String::from(GRAD_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.state_id, row.rollout_error, row.ncs_plan, row.ncs_step
        ));
    }
    out
}

/// Knobs for [`gradient_direction_study`].
#[derive(Clone, Copy, Debug)]
pub struct GradStudyConfig {
    pub gamma: f64,
    pub soft: bool,
    pub alpha: f64,
    /// Largest mean |Q − target| either critic may show on the probe
    /// segments before the study refuses to run.
    pub max_residual: f64,
}

struct RolloutTrace {
    /// k+1 state levels, each n×obs_dim; level 0 is the starts.
    states: Vec<Array2<f64>>,
    /// k action batches, each n×act_dim.
    actions: Vec<Array2<f64>>,
    /// k reward columns, each n×1.
    rewards: Vec<Array2<f64>>,
}

fn row_matrix(a: &Array2<f64>, i: usize) -> Array2<f64> {
    let row = a.row(i).to_vec();
    Array2::from_shape_vec((1, row.len()), row).expect("row extraction")
}

fn normal_matrix(rng: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), rng::normal_vec(rng, rows * cols))
        .expect("noise matrix construction")
}

/// Unrolls the frozen policy through `dynamics` for k mean-mode steps,
/// acting with the provided per-step noise.
fn rollout_trace(
    actor: &PlanningActor,
    dynamics: &mut dyn Dynamics,
    starts: &Array2<f64>,
    noise: &[Array2<f64>],
    rng: &mut Stream,
) -> Result<RolloutTrace> {
    let mut states = vec![starts.to_owned()];
    let mut actions = Vec::with_capacity(noise.len());
    let mut rewards = Vec::with_capacity(noise.len());
    for eps in noise {
        let cur = states.last().expect("at least the starts").clone();
        let mut tape = Tape::new();
        let s = tape.input(cur.clone());
        let (a, _) = actor.policy_on_tape(&mut tape, s, eps.clone())?;
        let acts = tape.value(a).to_owned();
        let (next, reward) = dynamics.step_batch(&cur, &acts, rng, StepMode::Mean)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dynamics produced a non-finite state".into()));
        }
        states.push(next);
        actions.push(acts);
        rewards.push(reward);
    }
    Ok(RolloutTrace { states, actions, rewards })
}

/// Flattens the policy gradient into one vector, parameters in store order.
fn flatten_policy_grads(actor: &PlanningActor, grads: &Gradients) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for name in actor.store().names() {
        match grads.param(name) {
            Some(g) => out.extend(g.iter().copied()),
            None => out.extend(std::iter::repeat_n(0.0, actor.store().get(name)?.len())),
        }
    }
    Ok(out)
}

/// ∇_φ of the plan value at rollout state level 0: all k actions come from
/// the policy, each evaluated at its fixed visited state, and the plan
/// critic reads the start state with the whole action sequence.
fn plan_value_grad(
    actor: &PlanningActor,
    critic: &CriticPair,
    states: &[Array2<f64>],
    noise: &[Array2<f64>],
    i: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let s0 = tape.input(row_matrix(&states[0], i));
    let mut plan = None;
    for (m, eps) in noise.iter().enumerate() {
        let s = if m == 0 { s0 } else { tape.input(row_matrix(&states[m], i)) };
        let (action, _) = actor.policy_on_tape(&mut tape, s, row_matrix(eps, i))?;
        plan = Some(match plan {
            None => action,
            Some(prev) => tape.concat_cols(prev, action)?,
        });
    }
    let q = critic.q_on_tape(&mut tape, s0, plan.expect("k ≥ 1"))?;
    let neg = tape.scale(q, -1.0);
    let loss = tape.mean_all(neg);
    let grads = tape.backward(loss)?;
    flatten_policy_grads(actor, &grads)
}

/// ∇_φ averaged over the rollout: at every visited state, the gradient of
/// the single-step value of the action taken there.
fn step_value_grad(
    actor: &PlanningActor,
    critic: &CriticPair,
    states: &[Array2<f64>],
    noise: &[Array2<f64>],
    i: usize,
) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for (m, eps) in noise.iter().enumerate() {
        let mut tape = Tape::new();
        let s = tape.input(row_matrix(&states[m], i));
        let (action, _) = actor.policy_on_tape(&mut tape, s, row_matrix(eps, i))?;
        let q = critic.q_on_tape(&mut tape, s, action)?;
        let neg = tape.scale(q, -1.0);
        let loss = tape.mean_all(neg);
        let grads = tape.backward(loss)?;
        let g = flatten_policy_grads(actor, &grads)?;
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    *x += y;
                }
                a
            }
        });
    }
    let mut g = acc.expect("k ≥ 1");
    let k = noise.len() as f64;
    for v in &mut g {
        *v /= k;
    }
    Ok(g)
}

/// Turns one traced rollout into per-start plan segments covering its
/// first `k` steps.
fn trace_segments(trace: &RolloutTrace, k: usize) -> Result<Vec<PlanSegment>> {
    let n = trace.states[0].nrows();
    (0..n)
        .map(|i| {
            PlanSegment::new(
                trace.states[0].row(i).to_vec(),
                (0..k).map(|m| trace.actions[m].row(i).to_vec()).collect(),
                (0..k).map(|m| trace.rewards[m][[i, 0]]).collect(),
                trace.states[k].row(i).to_vec(),
                None,
            )
        })
        .collect()
}

/// Mean |Q − target| of the critic over the given segments, with plan
/// bootstraps drawn by the frozen actor through the frozen model.
fn critic_residual(
    critic: &CriticPair,
    actor: &PlanningActor,
    model: &mut EnsembleDynamicsModel,
    segments: &[PlanSegment],
    config: &GradStudyConfig,
    rng: &mut Stream,
) -> Result<f64> {
    let targets = {
        let mut planner = ActorPlanner::new(actor, model);
        td_targets(
            critic,
            segments,
            &mut planner,
            config.gamma,
            config.soft,
            config.alpha,
            rng,
        )?
    };
    let obs_dim = critic.obs_dim();
    let width = critic.k() * critic.act_dim();
    let mut states = Array2::zeros((segments.len(), obs_dim));
    let mut plans = Array2::zeros((segments.len(), width));
    for (i, seg) in segments.iter().enumerate() {
        for (c, &v) in seg.s0().iter().enumerate() {
            states[[i, c]] = v;
        }
        for (c, &v) in seg.actions().iter().flatten().enumerate() {
            plans[[i, c]] = v;
        }
    }
    let q = critic.q_online(&states, &plans)?;
    let total: f64 = targets.iter().enumerate().map(|(i, y)| (q[[i, 0]] - y).abs()).sum();
    Ok(total / segments.len() as f64)
}

/// Compares plan-value gradients against averaged single-step gradients on
/// the same start states, once through `real` and once through `fake`, and
/// scores each pair's directional agreement.
///
/// `model` is the frozen dynamics model both critics were trained against;
/// it draws the bootstrap plans for the convergence precondition, which
/// rejects either critic whose probe residual exceeds
/// `config.max_residual` with a convergence error. `fake` is the dynamics
/// under study — typically that same model reloaded, optionally wrapped in
/// [`NoisyDynamics`].
#[allow(clippy::too_many_arguments)]
pub fn gradient_direction_study(
    actor: &PlanningActor,
    plan_critic: &CriticPair,
    step_critic: &CriticPair,
    model: &mut EnsembleDynamicsModel,
    real: &mut dyn Dynamics,
    fake: &mut dyn Dynamics,
    starts: &Array2<f64>,
    config: &GradStudyConfig,
    rng: &mut Stream,
) -> Result<Vec<GradStudyRow>> {
    let k = actor.k();
    if starts.nrows() == 0 || starts.ncols() != actor.obs_dim() {
        return Err(Error::Shape(format!(
            "expected n×{} start states, got {}×{}",
            actor.obs_dim(),
            starts.nrows(),
            starts.ncols()
        )));
    }
    if starts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite start state".into()));
    }
    if plan_critic.k() != k
        || plan_critic.obs_dim() != actor.obs_dim()
        || plan_critic.act_dim() != actor.act_dim()
    {
        return Err(Error::Shape("plan critic does not match the actor".into()));
    }
    if step_critic.k() != 1
        || step_critic.obs_dim() != actor.obs_dim()
        || step_critic.act_dim() != actor.act_dim()
    {
        return Err(Error::Shape("step critic must be single-step over the same widths".into()));
    }
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(Error::Contract(format!("gamma must lie in [0, 1), got {}", config.gamma)));
    }
    if config.soft && !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(Error::Contract(format!(
            "alpha must be finite and ≥ 0, got {}",
            config.alpha
        )));
    }
    if !(config.max_residual >= 0.0) {
        return Err(Error::Contract(format!(
            "max_residual must be ≥ 0, got {}",
            config.max_residual
        )));
    }

    let n = starts.nrows();
    let noise: Vec<Array2<f64>> =
        (0..k).map(|_| normal_matrix(rng, n, actor.act_dim())).collect();
    let real_trace = rollout_trace(actor, real, starts, &noise, rng)?;
    let fake_trace = rollout_trace(actor, fake, starts, &noise, rng)?;

    let plan_probes = trace_segments(&real_trace, k)?;
    let plan_residual = critic_residual(plan_critic, actor, model, &plan_probes, config, rng)?;
    if plan_residual > config.max_residual {
        return Err(Error::Convergence {
            msg: "plan critic has not converged on the probe segments".into(),
            residual: plan_residual,
        });
    }
    let one_step = actor.with_plan_length(1)?;
    let step_probes = trace_segments(&real_trace, 1)?;
    let step_residual =
        critic_residual(step_critic, &one_step, model, &step_probes, config, rng)?;
    if step_residual > config.max_residual {
        return Err(Error::Convergence {
            msg: "step critic has not converged on the probe segments".into(),
            residual: step_residual,
        });
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let g_plan = plan_value_grad(actor, plan_critic, &real_trace.states, &noise, i)?;
        let h_plan = plan_value_grad(actor, plan_critic, &fake_trace.states, &noise, i)?;
        let g_step = step_value_grad(actor, step_critic, &real_trace.states, &noise, i)?;
        let h_step = step_value_grad(actor, step_critic, &fake_trace.states, &noise, i)?;
        let error: f64 = (1..=k)
            .map(|m| {
                real_trace.states[m]
                    .row(i)
                    .iter()
                    .zip(fake_trace.states[m].row(i).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / k as f64;
        rows.push(GradStudyRow {
            state_id: i,
            rollout_error: error,
            ncs_plan: normalized_cosine(&g_plan, &h_plan)?,
            ncs_step: normalized_cosine(&g_step, &h_step)?,
        });
    }
    Ok(rows)
}

/// Monte-Carlo rollouts stop once the running discount drops below this.
pub const MC_DISCOUNT_FLOOR: f64 = 1e-4;

/// One state's verdict in the value-bias study.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasStudyRow {
    pub state_id: usize,
    pub q_estimate: f64,
    pub mc_value: f64,
    pub mc_std_error: f64,
    pub normalized_bias: f64,
}

pub const BIAS_CSV_HEADER: &str = "state_id,q_estimate,mc_value,mc_std_error,normalized_bias";

/// Renders value-bias rows as CSV under [`BIAS_CSV_HEADER`].
pub fn bias_rows_to_csv(rows: &[BiasStudyRow]) -> String {
    let mut out = String::from(BIAS_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.state_id, row.q_estimate, row.mc_value, row.mc_std_error, row.normalized_bias
        ));
    }
    out
}

/// Per-state (estimate − MC) divided by |mean MC value| across the states.
/// A zero mean leaves the bias undefined and errs as degenerate.
pub fn normalized_bias(estimates: &[f64], mc_values: &[f64]) -> Result<Vec<f64>> {
    if estimates.len() != mc_values.len() {
        return Err(Error::Shape(format!(
            "{} estimates against {} values",
            estimates.len(),
            mc_values.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Contract("bias needs at least one state".into()));
    }
    if estimates.iter().chain(mc_values).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in bias inputs".into()));
    }
    let denom = (mc_values.iter().sum::<f64>() / mc_values.len() as f64).abs();
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "mean Monte-Carlo value is zero, so relative bias is undefined".into(),
        ));
    }
    Ok(estimates.iter().zip(mc_values).map(|(e, m)| (e - m) / denom).collect())
}

fn one_row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row construction")
}

/// Walks the environment under the stochastic policy and snapshots the
/// first `n` states visited, resetting whenever an episode ends.
pub fn collect_on_policy_states(
    env: &mut dyn Env,
    actor: &PlanningActor,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<EnvState>> {
    if n == 0 {
        return Err(Error::Contract("state collection needs n ≥ 1".into()));
    }
    if env.spec().obs_dim != actor.obs_dim() || env.spec().act_dim != actor.act_dim() {
        return Err(Error::Shape("environment widths do not match the actor".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut obs = env.reset(rng);
    while out.len() < n {
        out.push(env.state());
        let action = actor.act_batch(&one_row(&obs), rng)?;
        let outcome = env.step(&action.row(0).to_vec(), rng)?;
        obs = if outcome.done { env.reset(rng) } else { outcome.observation };
    }
    Ok(out)
}

/// Samples one k-action plan by walking the real environment from `state`
/// under the stochastic policy. When the episode ends mid-plan, the
/// remaining actions are drawn at the final observation.
pub fn plan_from_state(
    env: &mut dyn Env,
    actor: &PlanningActor,
    state: &EnvState,
    rng: &mut Stream,
) -> Result<Vec<Vec<f64>>> {
    let k = actor.k();
    env.set_state(state)?;
    let mut obs = state.observation.clone();
    let mut plan = Vec::with_capacity(k);
    while plan.len() < k {
        let action = actor.act_batch(&one_row(&obs), rng)?.row(0).to_vec();
        plan.push(action.clone());
        if plan.len() == k {
            break;
        }
        let outcome = env.step(&action, rng)?;
        if outcome.done {
            while plan.len() < k {
                plan.push(actor.act_batch(&one_row(&outcome.observation), rng)?.row(0).to_vec());
            }
            break;
        }
        obs = outcome.observation;
    }
    Ok(plan)
}

fn mc_return(
    env: &mut dyn Env,
    actor: &PlanningActor,
    state: &EnvState,
    plan: &[Vec<f64>],
    gamma: f64,
    rng: &mut Stream,
) -> Result<f64> {
    env.set_state(state)?;
    let mut obs = state.observation.clone();
    let mut disc = 1.0;
    let mut ret = 0.0;
    for action in plan {
        if disc < MC_DISCOUNT_FLOOR {
            return Ok(ret);
        }
        let outcome = env.step(action, rng)?;
        ret += disc * outcome.reward;
        disc *= gamma;
        if outcome.done {
            return Ok(ret);
        }
        obs = outcome.observation;
    }
    loop {
        if disc < MC_DISCOUNT_FLOOR {
            return Ok(ret);
        }
        let action = actor.act_batch(&one_row(&obs), rng)?.row(0).to_vec();
        let outcome = env.step(&action, rng)?;
        ret += disc * outcome.reward;
        disc *= gamma;
        if outcome.done {
            return Ok(ret);
        }
        obs = outcome.observation;
    }
}

/// Monte-Carlo plan value at one captured state: execute the plan's
/// actions, then follow the stochastic policy until the episode ends or
/// the discount falls under [`MC_DISCOUNT_FLOOR`]. Returns the sample mean
/// and its standard error (zero for a single rollout).
pub fn mc_plan_value(
    env: &mut dyn Env,
    actor: &PlanningActor,
    state: &EnvState,
    plan: &[Vec<f64>],
    gamma: f64,
    n_mc: usize,
    rng: &mut Stream,
) -> Result<(f64, f64)> {
    if n_mc == 0 {
        return Err(Error::Contract("Monte-Carlo estimation needs n ≥ 1".into()));
    }
    if plan.is_empty() {
        return Err(Error::Contract("plan must hold at least one action".into()));
    }
    if state.done {
        return Err(Error::Contract("cannot estimate a plan value at a terminal state".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Contract(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let returns: Vec<f64> = (0..n_mc)
        .map(|_| mc_return(env, actor, state, plan, gamma, rng))
        .collect::<Result<_>>()?;
    let mean = returns.iter().sum::<f64>() / n_mc as f64;
    let std_error = if n_mc > 1 {
        let var =
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n_mc - 1) as f64;
        (var / n_mc as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std_error))
}

/// Compares the critic's plan values against Monte-Carlo ground truth on
/// freshly collected on-policy states, one row per state in visit order.
/// Each state gets one sampled plan; the critic reads it directly while
/// the environment replays it `n_mc` times.
pub fn value_bias_study(
    actor: &PlanningActor,
    critic: &CriticPair,
    env: &mut dyn Env,
    n_states: usize,
    n_mc: usize,
    gamma: f64,
    rng: &mut Stream,
) -> Result<Vec<BiasStudyRow>> {
    if critic.k() != actor.k()
        || critic.obs_dim() != actor.obs_dim()
        || critic.act_dim() != actor.act_dim()
    {
        return Err(Error::Shape("critic does not match the actor".into()));
    }
    let states = collect_on_policy_states(env, actor, n_states, rng)?;
    let mut estimates = Vec::with_capacity(n_states);
    let mut mc_means = Vec::with_capacity(n_states);
    let mut mc_errors = Vec::with_capacity(n_states);
    for state in &states {
        let plan = plan_from_state(env, actor, state, rng)?;
        let flat: Vec<f64> = plan.iter().flatten().copied().collect();
        let q = critic.q_online(&one_row(&state.observation), &one_row(&flat))?[[0, 0]];
        let (mean, std_error) = mc_plan_value(env, actor, state, &plan, gamma, n_mc, rng)?;
        estimates.push(q);
        mc_means.push(mean);
        mc_errors.push(std_error);
    }
    let biases = normalized_bias(&estimates, &mc_means)?;
    Ok((0..states.len())
        .map(|i| BiasStudyRow {
            state_id: i,
            q_estimate: estimates[i],
            mc_value: mc_means[i],
            mc_std_error: mc_errors[i],
            normalized_bias: biases[i],
        })
        .collect())
}
