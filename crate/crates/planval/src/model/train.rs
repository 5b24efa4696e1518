//! Likelihood training with bootstrap resampling and holdout early stopping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::buffer::SegmentBuffer;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::ensemble::{EnsembleDynamicsModel, Normalization, TransitionBatch};

/// Epochs without holdout improvement before a member stops training.
pub const HOLDOUT_PATIENCE: usize = 5;

/// What a training run did, member by member.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Per member: holdout NLL before training (entry 0) and after each
    /// completed epoch.
    pub holdout_nll: Vec<Vec<f64>>,
    /// Per member: index into its trajectory where the kept parameters live.
    pub best_epoch: Vec<usize>,
    /// Elite members, ascending.
    pub elites: Vec<usize>,
    /// Rows set aside for the holdout split.
    pub holdout_size: usize,
}

impl TrainReport {
    /// Mean holdout NLL of the elite members at their kept parameters.
    pub fn elite_holdout_nll(&self) -> f64 {
        let total: f64 = self
            .elites
            .iter()
            .map(|&m| self.holdout_nll[m][self.best_epoch[m]])
            .sum();
        total / self.elites.len() as f64
    }
}

/// Members with the lowest scores win; ties break toward the lower index.
pub(crate) fn select_elites(scores: &[f64], n_elites: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("holdout scores are finite")
            .then(a.cmp(&b))
    });
    let mut elites: Vec<usize> = order.into_iter().take(n_elites).collect();
    elites.sort_unstable();
    elites
}

/// Fits the whole ensemble to the environment buffer: refreshes the
/// normalization, trains each member on its own bootstrap resample with
/// early stopping on a shared holdout split, restores each member's best
/// parameters, and installs the elite set.
pub fn train_model(
    model: &mut EnsembleDynamicsModel,
    env_buffer: &SegmentBuffer,
    holdout_fraction: f64,
    max_epochs: usize,
    rng: &mut Stream,
) -> Result<TrainReport> {
    let batch_size = model.config().batch_size;
    let n = env_buffer.len();
    if n < 10 * batch_size {
        return Err(Error::Capacity(format!(
            "model training needs at least {} transitions, buffer holds {n}",
            10 * batch_size
        )));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Contract("holdout fraction must lie in (0, 1)".into()));
    }
    if max_epochs == 0 {
        return Err(Error::Contract("need at least one training epoch".into()));
    }

    let all = TransitionBatch::from_buffer(env_buffer)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_hold = ((n as f64 * holdout_fraction).ceil() as usize).clamp(1, n - 1);
    let holdout_rows = &order[..n_hold];
    let train_rows = &order[n_hold..];

    let train = all.select(train_rows);
    model.set_normalization(Normalization::fit(&train.inputs(), &train.targets())?)?;
    let holdout = all.select(holdout_rows);

    let lr = model.config().learning_rate;
    let n_members = model.n_members();
    let mut trajectories = Vec::with_capacity(n_members);
    let mut best_epochs = Vec::with_capacity(n_members);

    for m in 0..n_members {
        // Every member draws from its own stream so training one member
        // never perturbs another's data order.
        let mut mrng = rng::root(rng.gen::<u64>());
        let mut boot: Vec<usize> = (0..train_rows.len())
            .map(|_| train_rows[mrng.gen_range(0..train_rows.len())])
            .collect();

        let mut trajectory = vec![model.member_nll(m, &holdout)?];
        let mut best = trajectory[0];
        let mut best_epoch = 0;
        let mut best_values = model.member_store(m).snapshot_values();

        for epoch in 1..=max_epochs {
            boot.shuffle(&mut mrng);
            for chunk in boot.chunks_exact(batch_size) {
                let minibatch = all.select(chunk);
                let (_, grads) = model.member_nll_grads(m, &minibatch)?;
                model.member_store_mut(m).adam_step(&grads, lr)?;
            }
            let score = model.member_nll(m, &holdout)?;
            trajectory.push(score);
            if score < best {
                best = score;
                best_epoch = epoch;
                best_values = model.member_store(m).snapshot_values();
            } else if epoch - best_epoch >= HOLDOUT_PATIENCE {
                break;
            }
        }
        model.member_store_mut(m).restore_values(&best_values)?;
        trajectories.push(trajectory);
        best_epochs.push(best_epoch);
    }

    let finals: Vec<f64> = (0..n_members)
        .map(|m| trajectories[m][best_epochs[m]])
        .collect();
    let elites = select_elites(&finals, model.config().n_elites);
    model.set_elites(elites.clone())?;

    Ok(TrainReport {
        holdout_nll: trajectories,
        best_epoch: best_epochs,
        elites,
        holdout_size: n_hold,
    })
}
