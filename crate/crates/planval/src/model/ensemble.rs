//! The ensemble itself: members, normalization, likelihood, and stepping.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::buffer::SegmentBuffer;
use crate::ckpt::Checkpoint;
use crate::diff::{Gradients, Mlp, ParamStore, Tape, Var, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::StepMode;

/// Clamp range for predicted log-variances.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 0.5;

/// Weight of the penalty that pulls raw log-variances back into the clamp
/// range (the clamp itself has zero gradient outside it).
const BOUND_PENALTY: f64 = 0.01;

/// Smallest per-dimension normalization scale.
const STD_FLOOR: f64 = 1e-8;

/// Ensemble shape and optimizer settings.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub n_members: usize,
    pub n_elites: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_members: 5,
            n_elites: 3,
            hidden: vec![32, 32],
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 || self.n_elites == 0 || self.n_elites > self.n_members {
            return Err(Error::Contract(format!(
                "need 1 ≤ elites ≤ members, got {}/{}",
                self.n_elites, self.n_members
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Column-stacked rows of (s, a, r, s', done).
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    s: Array2<f64>,
    a: Array2<f64>,
    r: Array2<f64>,
    s_next: Array2<f64>,
    done: Vec<bool>,
}

impl TransitionBatch {
    pub fn new(
        s: Array2<f64>,
        a: Array2<f64>,
        r: Array2<f64>,
        s_next: Array2<f64>,
        done: Vec<bool>,
    ) -> Result<Self> {
        let n = s.nrows();
        if a.nrows() != n || r.nrows() != n || s_next.nrows() != n || done.len() != n {
            return Err(Error::Shape("batch arrays disagree on row count".into()));
        }
        if s_next.ncols() != s.ncols() {
            return Err(Error::Shape("state and successor widths differ".into()));
        }
        if r.ncols() != 1 {
            return Err(Error::Shape("rewards must form a single column".into()));
        }
        for v in s.iter().chain(a.iter()).chain(r.iter()).chain(s_next.iter()) {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite value in transition batch".into()));
            }
        }
        Ok(TransitionBatch { s, a, r, s_next, done })
    }

    /// Collects every transition currently stored in a buffer.
    pub fn from_buffer(buffer: &SegmentBuffer) -> Result<Self> {
        if buffer.is_empty() {
            return Err(Error::Capacity("cannot batch an empty buffer".into()));
        }
        let n = buffer.len();
        let first = buffer.transition(0);
        let (ds, da) = (first.observation.len(), first.action.len());
        let mut s = Array2::zeros((n, ds));
        let mut a = Array2::zeros((n, da));
        let mut r = Array2::zeros((n, 1));
        let mut s_next = Array2::zeros((n, ds));
        let mut done = Vec::with_capacity(n);
        for i in 0..n {
            let t = buffer.transition(i);
            for (j, v) in t.observation.iter().enumerate() {
                s[[i, j]] = *v;
            }
            for (j, v) in t.action.iter().enumerate() {
                a[[i, j]] = *v;
            }
            r[[i, 0]] = t.reward;
            for (j, v) in t.next_observation.iter().enumerate() {
                s_next[[i, j]] = *v;
            }
            done.push(t.done);
        }
        TransitionBatch::new(s, a, r, s_next, done)
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn s(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn r(&self) -> &Array2<f64> {
        &self.r
    }

    pub fn s_next(&self) -> &Array2<f64> {
        &self.s_next
    }

    pub fn done(&self) -> &[bool] {
        &self.done
    }

    /// Row subset in the given order.
    pub fn select(&self, rows: &[usize]) -> TransitionBatch {
        TransitionBatch {
            s: self.s.select(Axis(0), rows),
            a: self.a.select(Axis(0), rows),
            r: self.r.select(Axis(0), rows),
            s_next: self.s_next.select(Axis(0), rows),
            done: rows.iter().map(|&i| self.done[i]).collect(),
        }
    }

    /// Model inputs: (s, a) stacked column-wise.
    pub(crate) fn inputs(&self) -> Array2<f64> {
        concat_cols(&self.s, &self.a)
    }

    /// Model targets: (s' − s, r) stacked column-wise.
    pub(crate) fn targets(&self) -> Array2<f64> {
        concat_cols(&(&self.s_next - &self.s), &self.r)
    }
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, ca, cb) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Array2::zeros((n, ca + cb));
    out.slice_mut(s![.., ..ca]).assign(a);
    out.slice_mut(s![.., ca..]).assign(b);
    out
}

/// Per-dimension affine input/target scaling, fit on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    in_mean: Array2<f64>,
    in_std: Array2<f64>,
    out_mean: Array2<f64>,
    out_std: Array2<f64>,
}

impl Normalization {
    /// Means and floored standard deviations of the given rows.
    pub fn fit(inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.nrows() != targets.nrows() {
            return Err(Error::Shape("normalization needs matching, non-empty rows".into()));
        }
        let stat = |x: &Array2<f64>| {
            let n = x.nrows() as f64;
            let mean = x.sum_axis(Axis(0)) / n;
            let mut std = Array2::zeros((1, x.ncols()));
            for j in 0..x.ncols() {
                let var = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
                std[[0, j]] = var.sqrt().max(STD_FLOOR);
            }
            (mean.insert_axis(Axis(0)), std)
        };
        let (in_mean, in_std) = stat(inputs);
        let (out_mean, out_std) = stat(targets);
        Ok(Normalization { in_mean, in_std, out_mean, out_std })
    }

    /// Pass-through scaling (zero mean, unit deviation).
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        Normalization {
            in_mean: Array2::zeros((1, in_dim)),
            in_std: Array2::ones((1, in_dim)),
            out_mean: Array2::zeros((1, out_dim)),
            out_std: Array2::ones((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_mean.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.out_mean.ncols()
    }

    pub fn normalize_in(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.in_mean) / &self.in_std
    }

    pub fn normalize_out(&self, y: &Array2<f64>) -> Array2<f64> {
        (y - &self.out_mean) / &self.out_std
    }

    pub fn denormalize_out(&self, y: &Array2<f64>) -> Array2<f64> {
        y * &self.out_std + &self.out_mean
    }
}

pub(crate) struct Member {
    pub net: Mlp,
    pub store: ParamStore,
}

/// Ensemble of Gaussian next-state/reward predictors with an elite subset.
pub struct EnsembleDynamicsModel {
    obs_dim: usize,
    act_dim: usize,
    config: ModelConfig,
    members: Vec<Member>,
    elites: Vec<usize>,
    norm: Option<Normalization>,
}

impl EnsembleDynamicsModel {
    pub fn new(obs_dim: usize, act_dim: usize, config: ModelConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Shape("observation and action widths must be positive".into()));
        }
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(2 * (obs_dim + 1));
        let mut members = Vec::with_capacity(config.n_members);
        for _ in 0..config.n_members {
            let mut store = ParamStore::new();
            let net = Mlp::init(&mut store, "net", &sizes, rng)?;
            members.push(Member { net, store });
        }
        Ok(EnsembleDynamicsModel {
            obs_dim,
            act_dim,
            config,
            members,
            elites: Vec::new(),
            norm: None,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Width of the (Δs, r) target vector.
    pub fn target_dim(&self) -> usize {
        self.obs_dim + 1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.norm.as_ref()
    }

    /// Trained means: a normalization is installed and elites are chosen.
    pub fn is_trained(&self) -> bool {
        self.norm.is_some() && !self.elites.is_empty()
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.in_dim() != self.obs_dim + self.act_dim || norm.out_dim() != self.target_dim() {
            return Err(Error::Shape("normalization widths do not fit the model".into()));
        }
        self.norm = Some(norm);
        Ok(())
    }

    pub fn set_elites(&mut self, elites: Vec<usize>) -> Result<()> {
        if elites.is_empty() || elites.len() > self.members.len() {
            return Err(Error::Contract("elite set must be non-empty and within bounds".into()));
        }
        let mut sorted = elites;
        sorted.sort_unstable();
        sorted.dedup();
        if *sorted.last().expect("non-empty") >= self.members.len() {
            return Err(Error::Contract("elite index out of range".into()));
        }
        self.elites = sorted;
        Ok(())
    }

    /// Read-only parameter store of one member (handy for finite differences).
    pub fn member_store(&self, index: usize) -> &ParamStore {
        &self.members[index].store
    }

    pub fn member_store_mut(&mut self, index: usize) -> &mut ParamStore {
        &mut self.members[index].store
    }

    fn require_norm(&self) -> Result<&Normalization> {
        self.norm
            .as_ref()
            .ok_or_else(|| Error::State("model has no normalization yet (untrained)".into()))
    }

    /// Training objective of one member on a batch: mean over rows of the
    /// dimension-summed Gaussian NLL at the clamped log-variance, plus the
    /// bound penalty on the raw log-variance.  Returns parameter gradients.
    pub fn member_nll_grads(
        &self,
        index: usize,
        batch: &TransitionBatch,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Shape("cannot score an empty batch".into()));
        }
        let norm = self.require_norm()?;
        let member = &self.members[index];
        let x = norm.normalize_in(&batch.inputs());
        let y = norm.normalize_out(&batch.targets());
        let n = x.nrows() as f64;
        let d = self.target_dim();

        let mut tape = Tape::new();
        let xv = tape.input(x);
        let tv = tape.input(y);
        let out = member.net.forward(&mut tape, &member.store, xv)?;
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let lv = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;

        let err = tape.sub(mean, tv)?;
        let sq = tape.mul(err, err)?;
        let neg_lv = tape.scale(lv, -1.0);
        let inv_var = tape.exp(neg_lv);
        let weighted = tape.mul(sq, inv_var)?;
        let half = tape.add(lv, weighted)?;
        let half = tape.scale(half, 0.5);
        let elem = tape.add_const(half, HALF_LN_2PI);
        let total = tape.sum_all(elem);
        let nll = tape.scale(total, 1.0 / n);

        let over = tape.add_const(raw, -LOG_VAR_MAX);
        let over = tape.relu(over);
        let under = tape.add_const(raw, -LOG_VAR_MIN);
        let under = tape.scale(under, -1.0);
        let under = tape.relu(under);
        let breach = tape.add(over, under)?;
        let breach = tape.sum_all(breach);
        let penalty = tape.scale(breach, BOUND_PENALTY / n);

        let loss = tape.add(nll, penalty)?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite model loss".into()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// Plain holdout NLL of one member (no bound penalty), inference path.
    pub fn member_nll(&self, index: usize, batch: &TransitionBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Shape("cannot score an empty batch".into()));
        }
        let norm = self.require_norm()?;
        let member = &self.members[index];
        let x = norm.normalize_in(&batch.inputs());
        let y = norm.normalize_out(&batch.targets());
        let out = member.net.infer(&member.store, &x)?;
        let d = self.target_dim();
        let mut total = 0.0;
        for i in 0..x.nrows() {
            for j in 0..d {
                let mu = out[[i, j]];
                let lv = out[[i, d + j]].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                let e = y[[i, j]] - mu;
                total += HALF_LN_2PI + 0.5 * (lv + e * e * (-lv).exp());
            }
        }
        let value = total / x.nrows() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite model NLL".into()));
        }
        Ok(value)
    }

    /// Raw log-variance bound breach of one member, averaged over rows.
    fn member_penalty(&self, index: usize, batch: &TransitionBatch) -> Result<f64> {
        let norm = self.require_norm()?;
        let member = &self.members[index];
        let x = norm.normalize_in(&batch.inputs());
        let out = member.net.infer(&member.store, &x)?;
        let d = self.target_dim();
        let mut total = 0.0;
        for i in 0..x.nrows() {
            for j in 0..d {
                let raw = out[[i, d + j]];
                total += (raw - LOG_VAR_MAX).max(0.0) + (LOG_VAR_MIN - raw).max(0.0);
            }
        }
        Ok(BOUND_PENALTY * total / x.nrows() as f64)
    }

    /// Draws the per-row elite choice and step noise for a batch of `n`
    /// rows.  Mean mode keeps the elite draw but uses zero noise.
    pub fn draw_step_noise(
        &self,
        n: usize,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Vec<usize>, Array2<f64>)> {
        if self.elites.is_empty() {
            return Err(Error::State("model has no elite set yet (untrained)".into()));
        }
        let members: Vec<usize> = (0..n)
            .map(|_| self.elites[rng.gen_range(0..self.elites.len())])
            .collect();
        let d = self.target_dim();
        let noise = match mode {
            StepMode::Mean => Array2::zeros((n, d)),
            StepMode::Sample => {
                let mut eps = Array2::zeros((n, d));
                for v in eps.iter_mut() {
                    *v = rng::standard_normal(rng);
                }
                eps
            }
        };
        Ok((members, noise))
    }

    /// One model step per row with explicit member choices and noise:
    /// returns (s', r) denormalized, where s' = s + Δs.
    pub fn step_with(
        &self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        members: &[usize],
        noise: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = observations.nrows();
        let norm = self.require_norm()?;
        if observations.ncols() != self.obs_dim
            || actions.ncols() != self.act_dim
            || actions.nrows() != n
            || members.len() != n
            || noise.dim() != (n, self.target_dim())
        {
            return Err(Error::Shape("model step arrays disagree on shape".into()));
        }
        let x = norm.normalize_in(&concat_cols(observations, actions));
        let d = self.target_dim();

        let mut distinct: Vec<usize> = members.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if *distinct.last().expect("non-empty batch") >= self.members.len() {
            return Err(Error::Contract("member index out of range".into()));
        }

        let mut sampled = Array2::zeros((n, d));
        for &m in &distinct {
            let member = &self.members[m];
            let out = member.net.infer(&member.store, &x)?;
            for i in 0..n {
                if members[i] != m {
                    continue;
                }
                for j in 0..d {
                    let mu = out[[i, j]];
                    let lv = out[[i, d + j]].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                    sampled[[i, j]] = mu + (0.5 * lv).exp() * noise[[i, j]];
                }
            }
        }
        let y = norm.denormalize_out(&sampled);
        let delta = y.slice(s![.., ..self.obs_dim]).to_owned();
        let reward = y.slice(s![.., self.obs_dim..]).to_owned();
        Ok((observations + &delta, reward))
    }

    /// Convenience wrapper drawing elites and noise from the stream.
    pub fn model_step(
        &self,
        observations: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        mode: StepMode,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (members, noise) = self.draw_step_noise(observations.nrows(), rng, mode)?;
        self.step_with(observations, actions, &members, &noise)
    }

    /// Differentiable model step on the tape with explicit member choices
    /// and noise; matches [`EnsembleDynamicsModel::step_with`] exactly.
    ///
    /// Gradients flow into the chosen members' parameters and back through
    /// `observations`/`actions` (the reparameterization path).
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        observations: Var,
        actions: Var,
        members: &[usize],
        noise: &Array2<f64>,
    ) -> Result<(Var, Var)> {
        let (n, so) = tape.shape(observations);
        let norm = self.require_norm()?;
        if so != self.obs_dim
            || tape.shape(actions) != (n, self.act_dim)
            || members.len() != n
            || noise.dim() != (n, self.target_dim())
        {
            return Err(Error::Shape("model step arrays disagree on shape".into()));
        }
        let d = self.target_dim();

        let x = tape.concat_cols(observations, actions)?;
        let in_mean = tape.input(tile_row(&norm.in_mean, n));
        let inv_in_std = tape.input(tile_row(&norm.in_std.mapv(|v| 1.0 / v), n));
        let centered = tape.sub(x, in_mean)?;
        let xn = tape.mul(centered, inv_in_std)?;

        let mut distinct: Vec<usize> = members.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if *distinct.last().expect("non-empty batch") >= self.members.len() {
            return Err(Error::Contract("member index out of range".into()));
        }

        let mut combined: Option<Var> = None;
        for &m in &distinct {
            let member = &self.members[m];
            let out = member.net.forward(tape, &member.store, xn)?;
            let mut mask = Array2::zeros((n, 2 * d));
            for i in 0..n {
                if members[i] == m {
                    mask.row_mut(i).fill(1.0);
                }
            }
            let mask = tape.input(mask);
            let picked = tape.mul(out, mask)?;
            combined = Some(match combined {
                None => picked,
                Some(acc) => tape.add(acc, picked)?,
            });
        }
        let out = combined.expect("at least one member");

        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let lv = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let half_lv = tape.scale(lv, 0.5);
        let std = tape.exp(half_lv);
        let eps = tape.input(noise.clone());
        let jitter = tape.mul(std, eps)?;
        let sampled = tape.add(mean, jitter)?;

        let out_std = tape.input(tile_row(&norm.out_std, n));
        let out_mean = tape.input(tile_row(&norm.out_mean, n));
        let scaled = tape.mul(sampled, out_std)?;
        let y = tape.add(scaled, out_mean)?;

        let delta = tape.slice_cols(y, 0, self.obs_dim)?;
        let reward = tape.slice_cols(y, self.obs_dim, self.obs_dim + 1)?;
        let next = tape.add(observations, delta)?;
        Ok((next, reward))
    }

    /// Writes config, normalization, elites, and every member store under
    /// `prefix` into a checkpoint.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let key = |name: &str| format!("{prefix}.{name}");
        ck.set_meta(&key("obs_dim"), &self.obs_dim.to_string())?;
        ck.set_meta(&key("act_dim"), &self.act_dim.to_string())?;
        ck.set_meta(&key("n_members"), &self.config.n_members.to_string())?;
        ck.set_meta(&key("n_elites"), &self.config.n_elites.to_string())?;
        ck.set_meta(&key("hidden"), &join_usizes(&self.config.hidden))?;
        ck.set_meta(&key("learning_rate"), &format!("{:.16e}", self.config.learning_rate))?;
        ck.set_meta(&key("batch_size"), &self.config.batch_size.to_string())?;
        ck.set_meta(&key("elites"), &join_usizes(&self.elites))?;
        if let Some(norm) = &self.norm {
            ck.insert_array(&key("norm.in_mean"), norm.in_mean.clone())?;
            ck.insert_array(&key("norm.in_std"), norm.in_std.clone())?;
            ck.insert_array(&key("norm.out_mean"), norm.out_mean.clone())?;
            ck.insert_array(&key("norm.out_std"), norm.out_std.clone())?;
        }
        for (i, member) in self.members.iter().enumerate() {
            ck.put_store(&key(&format!("member{i}")), &member.store)?;
        }
        Ok(())
    }

    /// Rebuilds a model previously written with
    /// [`EnsembleDynamicsModel::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let key = |name: &str| format!("{prefix}.{name}");
        let usize_meta = |name: &str| -> Result<usize> {
            ck.require_meta(&key(name))?
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer for {}", key(name))))
        };
        let obs_dim = usize_meta("obs_dim")?;
        let act_dim = usize_meta("act_dim")?;
        let config = ModelConfig {
            n_members: usize_meta("n_members")?,
            n_elites: usize_meta("n_elites")?,
            hidden: split_usizes(ck.require_meta(&key("hidden"))?)?,
            learning_rate: ck
                .require_meta(&key("learning_rate"))?
                .parse::<f64>()
                .map_err(|_| Error::Config("bad learning rate in checkpoint".into()))?,
            batch_size: usize_meta("batch_size")?,
        };
        config.validate()?;
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(2 * (obs_dim + 1));
        let mut members = Vec::with_capacity(config.n_members);
        for i in 0..config.n_members {
            let store = ck.get_store(&key(&format!("member{i}")))?;
            let net = Mlp::bind("net", &sizes)?;
            members.push(Member { net, store });
        }
        let mut model = EnsembleDynamicsModel {
            obs_dim,
            act_dim,
            config,
            members,
            elites: Vec::new(),
            norm: None,
        };
        let elites = split_usizes(ck.require_meta(&key("elites"))?)?;
        if !elites.is_empty() {
            model.set_elites(elites)?;
        }
        if ck.array(&key("norm.in_mean")).is_ok() {
            model.set_normalization(Normalization {
                in_mean: ck.array(&key("norm.in_mean"))?.clone(),
                in_std: ck.array(&key("norm.in_std"))?.clone(),
                out_mean: ck.array(&key("norm.out_mean"))?.clone(),
                out_std: ck.array(&key("norm.out_std"))?.clone(),
            })?;
        }
        Ok(model)
    }
}

/// Mean over members of the per-member training objective (dimension-summed
/// Gaussian NLL on normalized targets, averaged over rows, plus the
/// log-variance bound penalty).
pub fn model_nll(model: &EnsembleDynamicsModel, batch: &TransitionBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("cannot score an empty batch".into()));
    }
    let mut total = 0.0;
    for m in 0..model.n_members() {
        total += model.member_nll(m, batch)? + model.member_penalty(m, batch)?;
    }
    let value = total / model.n_members() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite model NLL".into()));
    }
    Ok(value)
}

fn tile_row(row: &Array2<f64>, n: usize) -> Array2<f64> {
    let d = row.ncols();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        out.row_mut(i).assign(&row.row(0));
    }
    out
}

pub(crate) fn join_usizes(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn split_usizes(text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            part.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer list entry '{part}'")))
        })
        .collect()
}
