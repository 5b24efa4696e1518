//! Plan-value critic: Q(s, τ) over whole k-action sequences.
//!
//! Targets follow the extended Bellman form
//!
//!   y = Σ_{m<k} γ^m r_m + γ^k · [ Q⁻(s_k, τ') − α·log π(τ'|s_k) ],
//!
//! where τ' is one fresh plan drawn by the current planning policy at the
//! bootstrap state and the α term appears only in the soft variant. A
//! termination inside the segment truncates the reward sum and drops the
//! bootstrap entirely, so episode ends never leak stale values.

use ndarray::{s, Array2};

use crate::buffer::Window;
use crate::ckpt::Checkpoint;
use crate::diff::{Gradients, Mlp, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{join_usizes, split_usizes};
use crate::rng::Stream;

/// One k-step piece of experience: the start state, the k actions taken,
/// the k rewards observed, and the state reached after the last action.
///
/// If the episode ended at step j, `done_within = Some(j)` and every
/// reward past index j is zero; the constructor enforces this so targets
/// built later cannot accidentally count post-terminal reward.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanSegment {
    s0: Vec<f64>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    s_k: Vec<f64>,
    done_within: Option<usize>,
}

impl PlanSegment {
    /// Validates and normalizes a segment; rewards after a termination
    /// index are zeroed.
    pub fn new(
        s0: Vec<f64>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        s_k: Vec<f64>,
        done_within: Option<usize>,
    ) -> Result<Self> {
        let k = actions.len();
        if k == 0 {
            return Err(Error::Contract("a segment needs at least one action".into()));
        }
        if rewards.len() != k {
            return Err(Error::Shape(format!(
                "{} rewards for {k} actions",
                rewards.len()
            )));
        }
        if s0.is_empty() || s0.len() != s_k.len() {
            return Err(Error::Shape(format!(
                "segment endpoints have widths {} and {}",
                s0.len(),
                s_k.len()
            )));
        }
        let act_dim = actions[0].len();
        if act_dim == 0 || actions.iter().any(|a| a.len() != act_dim) {
            return Err(Error::Shape("segment actions have mixed widths".into()));
        }
        if let Some(j) = done_within {
            if j >= k {
                return Err(Error::Contract(format!(
                    "termination index {j} outside a {k}-step segment"
                )));
            }
        }
        let finite = s0.iter().chain(&s_k).chain(&rewards).all(|v| v.is_finite())
            && actions.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite value in segment".into()));
        }
        let mut rewards = rewards;
        if let Some(j) = done_within {
            for r in &mut rewards[j + 1..] {
                *r = 0.0;
            }
        }
        Ok(Self { s0, actions, rewards, s_k, done_within })
    }

    /// Builds a segment from a replay window, appending `pad_actions` when
    /// the window was cut short by a terminal transition. Padded steps sit
    /// past the termination, so they carry zero reward and the bootstrap
    /// is dropped.
    pub fn from_window(window: &Window, k: usize, pad_actions: Vec<Vec<f64>>) -> Result<Self> {
        let have = window.actions.len();
        if have != window.rewards.len() {
            return Err(Error::Contract(format!(
                "window carries {have} actions but {} rewards",
                window.rewards.len()
            )));
        }
        if have + pad_actions.len() != k {
            return Err(Error::Contract(format!(
                "{have} stored and {} padded actions cannot form a {k}-step segment",
                pad_actions.len()
            )));
        }
        if !window.done && !pad_actions.is_empty() {
            return Err(Error::Contract(
                "only terminal windows may be padded".into(),
            ));
        }
        let mut actions = window.actions.clone();
        actions.extend(pad_actions);
        let mut rewards = window.rewards.clone();
        rewards.resize(k, 0.0);
        let done_within = window.done.then(|| have - 1);
        Self::new(window.start.clone(), actions, rewards, window.end.clone(), done_within)
    }

    /// Number of actions in the segment.
    pub fn k(&self) -> usize {
        self.actions.len()
    }

    /// Observation width.
    pub fn obs_dim(&self) -> usize {
        self.s0.len()
    }

    /// Width of a single action.
    pub fn act_dim(&self) -> usize {
        self.actions[0].len()
    }

    /// Start state.
    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    /// The k actions.
    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    /// The k rewards, zero past any termination.
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// State after the last action.
    pub fn s_k(&self) -> &[f64] {
        &self.s_k
    }

    /// Index of the terminal step, if the episode ended inside.
    pub fn done_within(&self) -> Option<usize> {
        self.done_within
    }

    /// All k actions concatenated into one row of width k·act_dim.
    pub fn flat_plan(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k() * self.act_dim());
        for a in &self.actions {
            out.extend_from_slice(a);
        }
        out
    }

    fn check_matches(&self, critic: &CriticPair) -> Result<()> {
        if self.k() != critic.k || self.obs_dim() != critic.obs_dim
            || self.act_dim() != critic.act_dim
        {
            return Err(Error::Shape(format!(
                "segment ({}, {}, k={}) does not fit critic ({}, {}, k={})",
                self.obs_dim(),
                self.act_dim(),
                self.k(),
                critic.obs_dim,
                critic.act_dim,
                critic.k
            )));
        }
        Ok(())
    }
}

/// Supplies one fresh plan per query state, with its log density under
/// the planning policy. Bootstrap targets call this at every s_k.
pub trait Planner {
    /// Returns the flattened plans (one row of width k·act_dim per input
    /// row) and each plan's log density.
    fn plan_batch(
        &mut self,
        states: &Array2<f64>,
        rng: &mut Stream,
    ) -> Result<(Array2<f64>, Vec<f64>)>;
}

/// Online/target network pair over plan inputs [s | a_0 | … | a_{k−1}].
///
/// With `twin` enabled two independent heads share the stores and both the
/// bootstrap and inference return their elementwise minimum; the pathwise
/// gradient for an actor follows the first head.
pub struct CriticPair {
    obs_dim: usize,
    act_dim: usize,
    k: usize,
    tau_polyak: f64,
    hidden: Vec<usize>,
    nets: Vec<Mlp>,
    online: ParamStore,
    target: ParamStore,
}

impl CriticPair {
    /// Fresh pair with the target initialized to an exact copy of the
    /// online weights.
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        k: usize,
        hidden: &[usize],
        tau_polyak: f64,
        twin: bool,
        rng: &mut Stream,
    ) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Contract("critic needs nonzero state and action widths".into()));
        }
        if k == 0 {
            return Err(Error::Contract("plan length k must be at least 1".into()));
        }
        if !(tau_polyak > 0.0 && tau_polyak <= 1.0) {
            return Err(Error::Contract(format!(
                "tau_polyak must lie in (0, 1], got {tau_polyak}"
            )));
        }
        let mut sizes = vec![obs_dim + k * act_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut online = ParamStore::new();
        let mut nets = Vec::new();
        for i in 0..if twin { 2 } else { 1 } {
            nets.push(Mlp::init(&mut online, &format!("q{}", i + 1), &sizes, rng)?);
        }
        let mut target = ParamStore::new();
        let names: Vec<String> = online.names().map(str::to_string).collect();
        for name in &names {
            target.insert(name, online.get(name)?.clone())?;
        }
        Ok(Self {
            obs_dim,
            act_dim,
            k,
            tau_polyak,
            hidden: hidden.to_vec(),
            nets,
            online,
            target,
        })
    }

    /// Observation width.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Width of a single action.
    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Plan length.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Network input width: obs_dim + k·act_dim.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.k * self.act_dim
    }

    /// Target interpolation rate.
    pub fn tau_polyak(&self) -> f64 {
        self.tau_polyak
    }

    /// Hidden layer widths of each head.
    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Whether two heads are in play.
    pub fn twin(&self) -> bool {
        self.nets.len() == 2
    }

    /// The online parameters (read access for diagnostics and tests).
    pub fn online_store(&self) -> &ParamStore {
        &self.online
    }

    /// Mutable online parameters, e.g. for seeding fixtures.
    pub fn online_store_mut(&mut self) -> &mut ParamStore {
        &mut self.online
    }

    /// The target parameters.
    pub fn target_store(&self) -> &ParamStore {
        &self.target
    }

    /// Mutable target parameters.
    pub fn target_store_mut(&mut self) -> &mut ParamStore {
        &mut self.target
    }

    fn batch_input(&self, states: &Array2<f64>, plans: &Array2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.obs_dim || plans.ncols() != self.k * self.act_dim {
            return Err(Error::Shape(format!(
                "critic inputs are {}×{} states and {}×{} plans, expected widths {} and {}",
                states.nrows(),
                states.ncols(),
                plans.nrows(),
                plans.ncols(),
                self.obs_dim,
                self.k * self.act_dim
            )));
        }
        if states.nrows() != plans.nrows() {
            return Err(Error::Shape("states and plans disagree on row count".into()));
        }
        let mut x = Array2::zeros((states.nrows(), self.input_dim()));
        x.slice_mut(s![.., ..self.obs_dim]).assign(states);
        x.slice_mut(s![.., self.obs_dim..]).assign(plans);
        Ok(x)
    }

    fn q_min(&self, store: &ParamStore, states: &Array2<f64>, plans: &Array2<f64>) -> Result<Array2<f64>> {
        let x = self.batch_input(states, plans)?;
        let mut out: Option<Array2<f64>> = None;
        for net in &self.nets {
            let q = net.infer(store, &x)?;
            out = Some(match out {
                None => q,
                Some(mut prev) => {
                    prev.zip_mut_with(&q, |p, &v| *p = p.min(v));
                    prev
                }
            });
        }
        Ok(out.expect("critic always holds at least one head"))
    }

    /// Online Q values (minimum over heads), one row per state/plan pair.
    pub fn q_online(&self, states: &Array2<f64>, plans: &Array2<f64>) -> Result<Array2<f64>> {
        self.q_min(&self.online, states, plans)
    }

    /// Target Q values (minimum over heads).
    pub fn q_target(&self, states: &Array2<f64>, plans: &Array2<f64>) -> Result<Array2<f64>> {
        self.q_min(&self.target, states, plans)
    }

    /// Online Q of the first head as a tape node, for pathwise actor
    /// gradients. `states` and `plans` must already live on the tape.
    pub fn q_on_tape(&self, tape: &mut Tape, states: Var, plans: Var) -> Result<Var> {
        let (n, sw) = tape.shape(states);
        let (m, pw) = tape.shape(plans);
        if sw != self.obs_dim || pw != self.k * self.act_dim || n != m {
            return Err(Error::Shape(format!(
                "tape inputs {n}×{sw} and {m}×{pw} do not fit critic widths {} and {}",
                self.obs_dim,
                self.k * self.act_dim
            )));
        }
        let x = tape.concat_cols(states, plans)?;
        self.nets[0].forward(tape, &self.online, x)
    }

    /// Moves the target by ψ⁻ ← ψ⁻ + τ·(ψ − ψ⁻). Written in increment
    /// form so a target equal to its online twin is a bit-exact fixed
    /// point; τ = 1 copies outright.
    pub fn polyak_update(&mut self) -> Result<()> {
        let names: Vec<String> = self.online.names().map(str::to_string).collect();
        for name in &names {
            let next = {
                let o = self.online.get(name)?;
                if self.tau_polyak == 1.0 {
                    o.clone()
                } else {
                    let t = self.target.get(name)?;
                    t + &((o - t) * self.tau_polyak)
                }
            };
            self.target.set_value(name, next)?;
        }
        Ok(())
    }

    /// Serializes dimensions and both stores under `prefix`.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let key = |name: &str| format!("{prefix}.{name}");
        ck.set_meta(&key("obs_dim"), &self.obs_dim.to_string())?;
        ck.set_meta(&key("act_dim"), &self.act_dim.to_string())?;
        ck.set_meta(&key("k"), &self.k.to_string())?;
        ck.set_meta(&key("tau_polyak"), &format!("{:.16e}", self.tau_polyak))?;
        ck.set_meta(&key("hidden"), &join_usizes(&self.hidden))?;
        ck.set_meta(&key("twin"), if self.twin() { "true" } else { "false" })?;
        ck.put_store(&key("online"), &self.online)?;
        ck.put_store(&key("target"), &self.target)?;
        Ok(())
    }

    /// Rebuilds a pair written by [`CriticPair::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let key = |name: &str| format!("{prefix}.{name}");
        let usize_meta = |name: &str| -> Result<usize> {
            ck.require_meta(&key(name))?
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer for {}", key(name))))
        };
        let obs_dim = usize_meta("obs_dim")?;
        let act_dim = usize_meta("act_dim")?;
        let k = usize_meta("k")?;
        let tau_polyak = ck
            .require_meta(&key("tau_polyak"))?
            .parse::<f64>()
            .map_err(|_| Error::Config("bad tau_polyak in checkpoint".into()))?;
        if !(tau_polyak > 0.0 && tau_polyak <= 1.0) {
            return Err(Error::Config(format!(
                "checkpoint tau_polyak {tau_polyak} outside (0, 1]"
            )));
        }
        let hidden = split_usizes(ck.require_meta(&key("hidden"))?)?;
        let twin = match ck.require_meta(&key("twin"))? {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Config(format!("bad twin flag '{other}' in checkpoint")))
            }
        };
        let mut sizes = vec![obs_dim + k * act_dim];
        sizes.extend_from_slice(&hidden);
        sizes.push(1);
        let mut nets = Vec::new();
        for i in 0..if twin { 2 } else { 1 } {
            nets.push(Mlp::bind(&format!("q{}", i + 1), &sizes)?);
        }
        Ok(Self {
            obs_dim,
            act_dim,
            k,
            tau_polyak,
            hidden,
            nets,
            online: ck.get_store(&key("online"))?,
            target: ck.get_store(&key("target"))?,
        })
    }
}

/// Bootstrapped targets for a batch of segments, one per row.
///
/// Segments that terminate inside contribute only their discounted reward
/// sum; all others share one planner call at their end states. The soft
/// form subtracts α·log π(τ'|s_k) inside the bootstrap.
pub fn td_targets(
    critic: &CriticPair,
    segments: &[PlanSegment],
    planner: &mut dyn Planner,
    gamma: f64,
    soft: bool,
    alpha: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Contract(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if soft && !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("alpha must be finite and ≥ 0, got {alpha}")));
    }
    let mut targets = vec![0.0; segments.len()];
    let mut boot_rows = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        seg.check_matches(critic)?;
        let mut sum = 0.0;
        let mut disc = 1.0;
        for &r in seg.rewards() {
            sum += disc * r;
            disc *= gamma;
        }
        targets[i] = sum;
        if seg.done_within().is_none() {
            boot_rows.push(i);
        }
    }
    if !boot_rows.is_empty() {
        let mut ends = Array2::zeros((boot_rows.len(), critic.obs_dim()));
        for (row, &i) in boot_rows.iter().enumerate() {
            for (c, &v) in segments[i].s_k().iter().enumerate() {
                ends[[row, c]] = v;
            }
        }
        let (plans, log_probs) = planner.plan_batch(&ends, rng)?;
        if plans.nrows() != boot_rows.len() || log_probs.len() != boot_rows.len() {
            return Err(Error::Shape(format!(
                "planner returned {} plans and {} log-probs for {} states",
                plans.nrows(),
                log_probs.len(),
                boot_rows.len()
            )));
        }
        let q = critic.q_target(&ends, &plans)?;
        let scale = gamma.powi(critic.k() as i32);
        for (row, &i) in boot_rows.iter().enumerate() {
            let mut boot = q[[row, 0]];
            if soft {
                boot -= alpha * log_probs[row];
            }
            targets[i] += scale * boot;
        }
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("non-finite td target".into()));
    }
    Ok(targets)
}

/// [`td_targets`] for a single segment.
pub fn td_target(
    critic: &CriticPair,
    segment: &PlanSegment,
    planner: &mut dyn Planner,
    gamma: f64,
    soft: bool,
    alpha: f64,
    rng: &mut Stream,
) -> Result<f64> {
    let ys = td_targets(critic, std::slice::from_ref(segment), planner, gamma, soft, alpha, rng)?;
    Ok(ys[0])
}

fn loss_arrays(
    critic: &CriticPair,
    segments: &[PlanSegment],
    targets: &[f64],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if segments.is_empty() || segments.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} segments with {} targets",
            segments.len(),
            targets.len()
        )));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numeric("non-finite target value".into()));
    }
    let mut x = Array2::zeros((segments.len(), critic.input_dim()));
    for (row, seg) in segments.iter().enumerate() {
        seg.check_matches(critic)?;
        for (c, &v) in seg.s0().iter().enumerate() {
            x[[row, c]] = v;
        }
        for (c, v) in seg.flat_plan().into_iter().enumerate() {
            x[[row, critic.obs_dim() + c]] = v;
        }
    }
    let y = Array2::from_shape_vec((targets.len(), 1), targets.to_vec())
        .expect("target column construction");
    Ok((x, y))
}

/// Mean ½(Q − y)² against fixed targets, summed over heads, with the
/// gradients for every online parameter.
pub fn critic_loss_grads(
    critic: &CriticPair,
    segments: &[PlanSegment],
    targets: &[f64],
) -> Result<(f64, Gradients)> {
    let (x, y) = loss_arrays(critic, segments, targets)?;
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let yv = tape.input(y);
    let mut loss: Option<Var> = None;
    for net in &critic.nets {
        let q = net.forward(&mut tape, &critic.online, xv)?;
        let d = tape.sub(q, yv)?;
        let sq = tape.mul(d, d)?;
        let half = tape.scale(sq, 0.5);
        let mean = tape.mean_all(half);
        loss = Some(match loss {
            None => mean,
            Some(prev) => tape.add(prev, mean)?,
        });
    }
    let loss = loss.expect("critic always holds at least one head");
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite critic loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// The loss alone; targets are treated as constants.
pub fn critic_loss(critic: &CriticPair, segments: &[PlanSegment], targets: &[f64]) -> Result<f64> {
    critic_loss_grads(critic, segments, targets).map(|(value, _)| value)
}

/// One Adam step on the online parameters; returns the pre-step loss.
pub fn critic_update(
    critic: &mut CriticPair,
    segments: &[PlanSegment],
    targets: &[f64],
    learning_rate: f64,
) -> Result<f64> {
    let (value, grads) = critic_loss_grads(critic, segments, targets)?;
    critic.online.adam_step(&grads, learning_rate)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    use crate::buffer::Source;
    use crate::diff::finite_diff_check;
    use crate::rng;
    use crate::tabular::{
        evaluate_policy_default, plan_actions, plan_distribution, TabularMdp, TabularPolicy,
    };

    use super::*;

    /// Hands back the same plan and log density for every query state.
    struct ConstPlanner {
        plan: Vec<f64>,
        log_prob: f64,
    }

    impl Planner for ConstPlanner {
        fn plan_batch(
            &mut self,
            states: &Array2<f64>,
            _rng: &mut Stream,
        ) -> Result<(Array2<f64>, Vec<f64>)> {
            let n = states.nrows();
            let mut plans = Array2::zeros((n, self.plan.len()));
            for mut row in plans.rows_mut() {
                for (c, &v) in self.plan.iter().enumerate() {
                    row[c] = v;
                }
            }
            Ok((plans, vec![self.log_prob; n]))
        }
    }

    /// Samples plans by walking a tabular MDP under a fixed policy; states
    /// are one-hot rows and actions are encoded as their index.
    struct TabularPathPlanner {
        mdp: TabularMdp,
        policy: TabularPolicy,
        k: usize,
    }

    impl Planner for TabularPathPlanner {
        fn plan_batch(
            &mut self,
            states: &Array2<f64>,
            rng: &mut Stream,
        ) -> Result<(Array2<f64>, Vec<f64>)> {
            let n = states.nrows();
            let mut plans = Array2::zeros((n, self.k));
            let mut log_probs = Vec::with_capacity(n);
            for (row, state) in states.rows().into_iter().enumerate() {
                let mut x = decode_one_hot(state.as_slice().unwrap());
                let mut log_prob = 0.0;
                for step in 0..self.k {
                    let a = sample_categorical(self.policy.row(x), rng);
                    log_prob += self.policy.prob(x, a).ln();
                    plans[[row, step]] = a as f64;
                    x = sample_categorical(self.mdp.transition_row(x, a), rng);
                }
                log_probs.push(log_prob);
            }
            Ok((plans, log_probs))
        }
    }

    fn sample_categorical(probs: &[f64], rng: &mut Stream) -> usize {
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    fn decode_one_hot(row: &[f64]) -> usize {
        row.iter().position(|&v| v == 1.0).expect("one-hot state")
    }

    /// Rolls the toggle MDP from `start` through `plan`, returning the
    /// rewards and the final state (its dynamics are deterministic).
    fn roll_toggle(mdp: &TabularMdp, start: usize, plan: &[usize]) -> (Vec<f64>, usize) {
        let mut x = start;
        let mut rewards = Vec::with_capacity(plan.len());
        for &a in plan {
            rewards.push(mdp.r(x, a));
            let row = mdp.transition_row(x, a);
            x = row.iter().position(|&p| p > 0.5).unwrap();
        }
        (rewards, x)
    }

    fn toggle_segment(mdp: &TabularMdp, start: usize, plan: &[usize]) -> PlanSegment {
        let (rewards, end) = roll_toggle(mdp, start, plan);
        let n = mdp.n_states();
        PlanSegment::new(
            one_hot(n, start),
            plan.iter().map(|&a| vec![a as f64]).collect(),
            rewards,
            one_hot(n, end),
            None,
        )
        .unwrap()
    }

    fn copy_store(store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for name in store.names() {
            out.insert(name, store.get(name).unwrap().clone()).unwrap();
        }
        out
    }

    fn random_segments(
        n: usize,
        obs_dim: usize,
        act_dim: usize,
        k: usize,
        rng: &mut Stream,
    ) -> Vec<PlanSegment> {
        (0..n)
            .map(|_| {
                PlanSegment::new(
                    rng::normal_vec(rng, obs_dim),
                    (0..k).map(|_| rng::normal_vec(rng, act_dim)).collect(),
                    rng::normal_vec(rng, k),
                    rng::normal_vec(rng, obs_dim),
                    None,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn construction_zeroes_rewards_after_an_internal_termination() {
        let seg = PlanSegment::new(
            vec![0.5],
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![1.0, 2.0, 3.0],
            vec![-0.5],
            Some(0),
        )
        .unwrap();
        assert_eq!(seg.rewards(), &[1.0, 0.0, 0.0]);
        assert_eq!(seg.done_within(), Some(0));
        assert_eq!(seg.flat_plan(), vec![1.0, 2.0, 3.0]);

        let intact = PlanSegment::new(
            vec![0.5],
            vec![vec![1.0], vec![2.0]],
            vec![1.0, 2.0],
            vec![-0.5],
            None,
        )
        .unwrap();
        assert_eq!(intact.rewards(), &[1.0, 2.0]);

        assert!(PlanSegment::new(vec![0.0], vec![], vec![], vec![0.0], None).is_err());
        assert!(PlanSegment::new(
            vec![0.0],
            vec![vec![1.0], vec![1.0, 2.0]],
            vec![0.0, 0.0],
            vec![0.0],
            None
        )
        .is_err());
        assert!(PlanSegment::new(
            vec![0.0],
            vec![vec![1.0]],
            vec![0.0],
            vec![0.0],
            Some(1)
        )
        .is_err());
        assert!(PlanSegment::new(
            vec![f64::NAN],
            vec![vec![1.0]],
            vec![0.0],
            vec![0.0],
            None
        )
        .is_err());
    }

    #[test]
    fn windows_assemble_into_padded_segments() {
        let cut_short = Window {
            start: vec![1.0, 0.0],
            actions: vec![vec![0.1], vec![0.2]],
            rewards: vec![1.0, 2.0],
            end: vec![0.0, 1.0],
            done: true,
            source: Source::Env,
        };
        let seg = PlanSegment::from_window(&cut_short, 4, vec![vec![0.3], vec![0.4]]).unwrap();
        assert_eq!(seg.k(), 4);
        assert_eq!(seg.done_within(), Some(1));
        assert_eq!(seg.rewards(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(seg.flat_plan(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(seg.s_k(), &[0.0, 1.0]);

        let full = Window {
            start: vec![1.0, 0.0],
            actions: vec![vec![0.1], vec![0.2]],
            rewards: vec![1.0, 2.0],
            end: vec![0.0, 1.0],
            done: false,
            source: Source::Model,
        };
        let seg = PlanSegment::from_window(&full, 2, vec![]).unwrap();
        assert_eq!(seg.done_within(), None);

        assert!(PlanSegment::from_window(&full, 3, vec![vec![0.3]]).is_err());
        assert!(PlanSegment::from_window(&full, 3, vec![]).is_err());
        assert!(PlanSegment::from_window(&cut_short, 4, vec![vec![0.3]]).is_err());
    }

    #[test]
    fn targets_match_the_hand_written_bellman_form() {
        let mut rng = rng::root(41);
        let critic = CriticPair::new(2, 1, 2, &[8], 0.01, false, &mut rng).unwrap();
        let seg = PlanSegment::new(
            vec![0.3, -0.2],
            vec![vec![0.5], vec![-0.1]],
            vec![1.0, 2.0],
            vec![0.8, 0.1],
            None,
        )
        .unwrap();
        let mut planner = ConstPlanner { plan: vec![0.25, -0.75], log_prob: -1.3 };
        let gamma = 0.9;

        let ends = array![[0.8, 0.1]];
        let plans = array![[0.25, -0.75]];
        let q = critic.q_target(&ends, &plans).unwrap()[[0, 0]];
        let expected = 1.0 + gamma * 2.0 + gamma * gamma * q;
        let y = td_target(&critic, &seg, &mut planner, gamma, false, 0.0, &mut rng).unwrap();
        assert_abs_diff_eq!(y, expected, epsilon = 1e-12);

        let alpha = 0.4;
        let y_soft = td_target(&critic, &seg, &mut planner, gamma, true, alpha, &mut rng).unwrap();
        assert_abs_diff_eq!(
            y_soft,
            expected - gamma * gamma * alpha * (-1.3),
            epsilon = 1e-12
        );

        let ended = PlanSegment::new(
            vec![0.3, -0.2],
            vec![vec![0.5], vec![-0.1]],
            vec![1.0, 7.0],
            vec![0.8, 0.1],
            Some(0),
        )
        .unwrap();
        let y_end = td_target(&critic, &ended, &mut planner, gamma, false, 0.0, &mut rng).unwrap();
        assert_abs_diff_eq!(y_end, 1.0, epsilon = 1e-15);

        let one = CriticPair::new(2, 1, 1, &[8], 0.01, false, &mut rng).unwrap();
        let step = PlanSegment::new(
            vec![0.3, -0.2],
            vec![vec![0.5]],
            vec![3.5],
            vec![0.8, 0.1],
            None,
        )
        .unwrap();
        let mut single = ConstPlanner { plan: vec![0.25], log_prob: -0.7 };
        let y0 = td_target(&one, &step, &mut single, 0.0, false, 0.0, &mut rng).unwrap();
        assert_abs_diff_eq!(y0, 3.5, epsilon = 1e-15);
    }

    #[test]
    fn a_zero_residual_batch_leaves_parameters_untouched_but_counts_the_step() {
        let mut rng = rng::root(7);
        let mut critic = CriticPair::new(3, 2, 2, &[16], 0.01, false, &mut rng).unwrap();
        let segments = random_segments(5, 3, 2, 2, &mut rng);
        let (x, _) = loss_arrays(&critic, &segments, &vec![0.0; 5]).unwrap();
        let states = x.slice(s![.., ..3]).to_owned();
        let plans = x.slice(s![.., 3..]).to_owned();
        let targets: Vec<f64> = critic
            .q_online(&states, &plans)
            .unwrap()
            .column(0)
            .to_vec();

        let before = critic.online_store().snapshot_values();
        let steps_before = critic.online_store().step();
        let loss = critic_update(&mut critic, &segments, &targets, 1e-3).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(critic.online_store().snapshot_values(), before);
        assert_eq!(critic.online_store().step(), steps_before + 1);
    }

    #[test]
    fn an_offset_between_prediction_and_target_costs_half_its_square() {
        let mut rng = rng::root(8);
        let critic = CriticPair::new(2, 1, 3, &[12], 0.01, false, &mut rng).unwrap();
        let segments = random_segments(6, 2, 1, 3, &mut rng);
        let (x, _) = loss_arrays(&critic, &segments, &vec![0.0; 6]).unwrap();
        let states = x.slice(s![.., ..2]).to_owned();
        let plans = x.slice(s![.., 2..]).to_owned();
        let q = critic.q_online(&states, &plans).unwrap();

        let delta = 0.3;
        let targets: Vec<f64> = q.column(0).iter().map(|v| v + delta).collect();
        let loss = critic_loss(&critic, &segments, &targets).unwrap();
        assert_abs_diff_eq!(loss, 0.5 * delta * delta, epsilon = 1e-12);
    }

    #[test]
    fn loss_gradients_agree_with_finite_differences() {
        let mut rng = rng::root(9);
        let critic = CriticPair::new(3, 2, 3, &[8], 0.01, false, &mut rng).unwrap();
        let segments = random_segments(5, 3, 2, 3, &mut rng);
        let targets: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let CriticPair { obs_dim, act_dim, k, hidden, mut online, .. } = critic;
        let sizes: Vec<usize> = std::iter::once(obs_dim + k * act_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let worst = finite_diff_check(&mut online, 1e-5, 60, &mut rng, |store| {
            let shadow = CriticPair {
                obs_dim,
                act_dim,
                k,
                tau_polyak: 0.01,
                hidden: hidden.clone(),
                nets: vec![Mlp::bind("q1", &sizes).unwrap()],
                online: copy_store(store),
                target: ParamStore::new(),
            };
            critic_loss_grads(&shadow, &segments, &targets)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn polyak_updates_interpolate_exactly() {
        let mut rng = rng::root(10);
        let mut critic = CriticPair::new(1, 1, 1, &[], 0.005, false, &mut rng).unwrap();
        critic.online_store_mut().set_value("q1.w0", array![[1.0], [1.0]]).unwrap();
        critic.online_store_mut().set_value("q1.b0", array![[1.0]]).unwrap();
        critic.target_store_mut().set_value("q1.w0", array![[0.0], [0.0]]).unwrap();
        critic.target_store_mut().set_value("q1.b0", array![[0.0]]).unwrap();
        critic.polyak_update().unwrap();
        assert_eq!(critic.target_store().get("q1.w0").unwrap(), &array![[0.005], [0.005]]);
        assert_eq!(critic.target_store().get("q1.b0").unwrap(), &array![[0.005]]);

        let mut copy = CriticPair::new(4, 2, 2, &[8], 1.0, false, &mut rng).unwrap();
        let shift = copy.online_store().get("q1.w0").unwrap() + 0.37;
        copy.online_store_mut().set_value("q1.w0", shift).unwrap();
        copy.polyak_update().unwrap();
        assert_eq!(
            copy.online_store().snapshot_values(),
            copy.target_store().snapshot_values()
        );

        let mut fixed = CriticPair::new(4, 2, 2, &[8], 0.005, false, &mut rng).unwrap();
        let before = fixed.target_store().snapshot_values();
        fixed.polyak_update().unwrap();
        assert_eq!(fixed.target_store().snapshot_values(), before);
    }

    #[test]
    fn twin_heads_bootstrap_on_their_minimum() {
        let mut rng = rng::root(11);
        let critic = CriticPair::new(2, 1, 2, &[8], 0.01, true, &mut rng).unwrap();
        assert!(critic.twin());
        let states = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let plans = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));

        let x = critic.batch_input(&states, &plans).unwrap();
        let q1 = critic.nets[0].infer(&critic.target, &x).unwrap();
        let q2 = critic.nets[1].infer(&critic.target, &x).unwrap();
        let q = critic.q_target(&states, &plans).unwrap();
        for i in 0..4 {
            assert_eq!(q[[i, 0]], q1[[i, 0]].min(q2[[i, 0]]));
        }

        let segments = random_segments(4, 2, 1, 2, &mut rng);
        let targets = vec![0.1, -0.2, 0.3, 0.0];
        let o1 = critic.nets[0].infer(&critic.online, &loss_arrays(&critic, &segments, &targets).unwrap().0).unwrap();
        let o2 = critic.nets[1].infer(&critic.online, &loss_arrays(&critic, &segments, &targets).unwrap().0).unwrap();
        let mut expected = 0.0;
        for (head, q) in [o1, o2].into_iter().enumerate() {
            let _ = head;
            for (row, &y) in targets.iter().enumerate() {
                let d = q[[row, 0]] - y;
                expected += 0.5 * d * d / 4.0;
            }
        }
        let loss = critic_loss(&critic, &segments, &targets).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn sampled_targets_are_unbiased_for_the_toggle_mdp() {
        let mdp = TabularMdp::two_state_toggle();
        let policy = TabularPolicy::from_probs(2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let k = 2;
        let gamma = mdp.gamma();
        let mut rng = rng::root(12);
        let critic = CriticPair::new(2, 1, k, &[16], 0.01, false, &mut rng).unwrap();
        let seg = toggle_segment(&mdp, 0, &[1, 0]);
        let end_state = decode_one_hot(seg.s_k());

        let dist = plan_distribution(&mdp, &policy, end_state, k).unwrap();
        let mut planner = TabularPathPlanner { mdp: mdp.clone(), policy, k };

        for (soft, alpha) in [(false, 0.0), (true, 0.5)] {
            let mut exact_boot = 0.0;
            for (plan, prob) in dist.support() {
                if prob == 0.0 {
                    continue;
                }
                let ends = Array2::from_shape_vec((1, 2), one_hot(2, end_state)).unwrap();
                let enc = Array2::from_shape_vec(
                    (1, k),
                    plan.iter().map(|&a| a as f64).collect(),
                )
                .unwrap();
                let q = critic.q_target(&ends, &enc).unwrap()[[0, 0]];
                let soft_term = if soft { alpha * prob.ln() } else { 0.0 };
                exact_boot += prob * (q - soft_term);
            }
            let exact = seg.rewards()[0]
                + gamma * seg.rewards()[1]
                + gamma.powi(k as i32) * exact_boot;

            let n = 10_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let y =
                    td_target(&critic, &seg, &mut planner, gamma, soft, alpha, &mut rng).unwrap();
                sum += y;
                sum_sq += y * y;
            }
            let mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - exact).abs() <= 3.0 * se + 1e-12,
                "soft={soft}: mean {mean} vs exact {exact} (se {se})"
            );
        }
    }

    #[test]
    fn repeated_updates_recover_frozen_policy_plan_values() {
        let mdp = TabularMdp::two_state_toggle();
        let policy = TabularPolicy::uniform(2, 2);
        let k = 2;
        let gamma = mdp.gamma();
        let oracle = evaluate_policy_default(&mdp, &policy, k, false, 0.0).unwrap().q;

        let mut rng = rng::root(13);
        let mut critic = CriticPair::new(2, 1, k, &[32, 32], 0.05, false, &mut rng).unwrap();
        let mut planner =
            TabularPathPlanner { mdp: mdp.clone(), policy: policy.clone(), k };

        for _ in 0..2500 {
            let segments: Vec<PlanSegment> = (0..64)
                .map(|_| {
                    let start = rng.gen_range(0..2);
                    let plan: Vec<usize> =
                        (0..k).map(|_| sample_categorical(policy.row(start), &mut rng)).collect();
                    toggle_segment(&mdp, start, &plan)
                })
                .collect();
            let targets =
                td_targets(&critic, &segments, &mut planner, gamma, false, 0.0, &mut rng).unwrap();
            critic_update(&mut critic, &segments, &targets, 3e-3).unwrap();
            critic.polyak_update().unwrap();
        }

        let mut abs_err = 0.0;
        let mut count = 0;
        for s in 0..2 {
            for plan_idx in 0..oracle.n_plans() {
                let plan = plan_actions(2, k, plan_idx);
                let states = Array2::from_shape_vec((1, 2), one_hot(2, s)).unwrap();
                let enc = Array2::from_shape_vec(
                    (1, k),
                    plan.iter().map(|&a| a as f64).collect(),
                )
                .unwrap();
                let q = critic.q_online(&states, &enc).unwrap()[[0, 0]];
                abs_err += (q - oracle.get(s, plan_idx)).abs();
                count += 1;
            }
        }
        let mean_err = abs_err / count as f64;
        assert!(mean_err < 0.05, "mean |Q - Q^pi| = {mean_err}");
    }

    #[test]
    fn updates_are_bit_for_bit_reproducible() {
        let build = || {
            let mut rng = rng::root(14);
            let mut critic = CriticPair::new(2, 1, 2, &[16], 0.05, false, &mut rng).unwrap();
            let mut planner = ConstPlanner { plan: vec![0.1, -0.1], log_prob: -0.5 };
            for _ in 0..20 {
                let segments = random_segments(8, 2, 1, 2, &mut rng);
                let targets = td_targets(
                    &critic, &segments, &mut planner, 0.9, true, 0.2, &mut rng,
                )
                .unwrap();
                critic_update(&mut critic, &segments, &targets, 1e-3).unwrap();
                critic.polyak_update().unwrap();
            }
            (
                critic.online_store().snapshot_values(),
                critic.target_store().snapshot_values(),
            )
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let mut rng = rng::root(15);
        assert!(CriticPair::new(0, 1, 2, &[8], 0.01, false, &mut rng).is_err());
        assert!(CriticPair::new(2, 1, 0, &[8], 0.01, false, &mut rng).is_err());
        assert!(CriticPair::new(2, 1, 2, &[8], 0.0, false, &mut rng).is_err());
        assert!(CriticPair::new(2, 1, 2, &[8], 1.2, false, &mut rng).is_err());
        assert!(CriticPair::new(2, 1, 2, &[8], f64::NAN, false, &mut rng).is_err());

        let critic = CriticPair::new(2, 1, 2, &[8], 0.01, false, &mut rng).unwrap();
        assert_eq!(critic.input_dim(), 4);
        let wrong_k = random_segments(1, 2, 1, 3, &mut rng);
        let mut planner = ConstPlanner { plan: vec![0.0, 0.0], log_prob: 0.0 };
        assert!(td_targets(&critic, &wrong_k, &mut planner, 0.9, false, 0.0, &mut rng).is_err());
        let wrong_obs = random_segments(1, 3, 1, 2, &mut rng);
        assert!(critic_loss(&critic, &wrong_obs, &[0.0]).is_err());

        struct BadPlanner;
        impl Planner for BadPlanner {
            fn plan_batch(
                &mut self,
                states: &Array2<f64>,
                _rng: &mut Stream,
            ) -> Result<(Array2<f64>, Vec<f64>)> {
                Ok((Array2::zeros((states.nrows(), 1)), vec![0.0; states.nrows()]))
            }
        }
        let fine = random_segments(1, 2, 1, 2, &mut rng);
        assert!(td_targets(&critic, &fine, &mut BadPlanner, 0.9, false, 0.0, &mut rng).is_err());
        assert!(td_targets(&critic, &fine, &mut planner, 1.5, false, 0.0, &mut rng).is_err());
        assert!(td_targets(&critic, &fine, &mut planner, 0.9, true, -1.0, &mut rng).is_err());
        assert!(critic_loss(&critic, &fine, &[]).is_err());
    }

    #[test]
    fn checkpoints_round_trip_the_critic() {
        let mut rng = rng::root(16);
        let mut critic = CriticPair::new(3, 2, 2, &[8, 8], 0.02, true, &mut rng).unwrap();
        let segments = random_segments(4, 3, 2, 2, &mut rng);
        let targets = vec![0.3, -0.1, 0.0, 0.7];
        critic_update(&mut critic, &segments, &targets, 1e-3).unwrap();

        let mut ck = Checkpoint::new();
        critic.to_checkpoint(&mut ck, "critic").unwrap();
        let restored = CriticPair::from_checkpoint(
            &Checkpoint::from_text(&ck.to_text()).unwrap(),
            "critic",
        )
        .unwrap();

        assert_eq!(restored.k(), 2);
        assert_eq!(restored.tau_polyak(), 0.02);
        assert!(restored.twin());
        let states = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let plans = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(
            critic.q_online(&states, &plans).unwrap(),
            restored.q_online(&states, &plans).unwrap()
        );
        assert_eq!(
            critic.q_target(&states, &plans).unwrap(),
            restored.q_target(&states, &plans).unwrap()
        );
        assert_eq!(
            critic.online_store().step(),
            restored.online_store().step()
        );
    }
}
