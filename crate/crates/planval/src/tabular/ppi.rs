//! Policy iteration over plan values: evaluate the current policy to its
//! fixed point, improve against the resulting table, repeat until the
//! policy stops changing.

use crate::error::{Error, Result};

use super::backup::{evaluate_policy, PlanBackup};
use super::improve::improve_policy;
use super::mdp::{TabularMdp, TabularPolicy};
use super::plan::PlanValueTable;
use super::{DEFAULT_EVAL_TOL, MAX_EVAL_SWEEPS};

/// Sup-norm policy change below which the entropy-regularized loop stops.
const SOFT_PPI_TOL: f64 = 1e-10;

/// Diagnostics recorded for one evaluate-improve round.
#[derive(Debug, Clone)]
pub struct PpiIteration {
    /// Evaluation sweeps spent reaching the fixed point.
    pub sweeps: usize,
    /// Final evaluation residual.
    pub residual: f64,
    /// State values V^π of the policy evaluated this round.
    pub state_values: Vec<f64>,
    /// Largest entrywise decrease of this round's Q versus the previous
    /// round's (`None` on the first round). Zero or negative means the
    /// update was monotone.
    pub value_drop: Option<f64>,
    /// Sup distance between the policy before and after improvement.
    pub policy_change: f64,
}

/// A converged policy-iteration run.
#[derive(Debug, Clone)]
pub struct PpiOutcome {
    /// The final policy (deterministic unless `soft`).
    pub policy: TabularPolicy,
    /// Its evaluated plan-value table.
    pub q: PlanValueTable,
    /// Its state values.
    pub state_values: Vec<f64>,
    /// Per-round diagnostics, in order.
    pub iterations: Vec<PpiIteration>,
}

/// Runs policy iteration with k-step plan values.
///
/// Starts from `init` (uniform when absent). The greedy loop terminates
/// when improvement returns the policy unchanged; the entropy-regularized
/// loop terminates when the sup change drops below 1e-10. Exceeding
/// `max_iterations` is a convergence failure carrying the last change.
pub fn planning_policy_iteration(
    mdp: &TabularMdp,
    k: usize,
    soft: bool,
    alpha: f64,
    init: Option<&TabularPolicy>,
    max_iterations: usize,
) -> Result<PpiOutcome> {
    if max_iterations == 0 {
        return Err(Error::Contract("max_iterations must be at least 1".into()));
    }
    let mut policy = match init {
        Some(p) => {
            p.check_compatible(mdp)?;
            p.clone()
        }
        None => TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
    };
    let mut iterations = Vec::new();
    let mut prev_q: Option<PlanValueTable> = None;
    let mut last_change = f64::INFINITY;

    for _ in 0..max_iterations {
        let eval =
            evaluate_policy(mdp, &policy, k, soft, alpha, DEFAULT_EVAL_TOL, MAX_EVAL_SWEEPS)?;
        let backup = PlanBackup::new(mdp, &policy, k)?;
        let state_values = backup.state_values(&eval.q, soft, alpha);
        let value_drop = prev_q.as_ref().map(|pq| pq.max_entrywise_drop(&eval.q));

        let improved = improve_policy(mdp, &eval.q, Some(&policy), soft, alpha)?;
        let policy_change = policy.sup_distance(&improved);
        iterations.push(PpiIteration {
            sweeps: eval.sweeps,
            residual: eval.residual,
            state_values: state_values.clone(),
            value_drop,
            policy_change,
        });

        let converged =
            if soft { policy_change < SOFT_PPI_TOL } else { policy_change == 0.0 };
        if converged {
            return Ok(PpiOutcome { policy: improved, q: eval.q, state_values, iterations });
        }
        prev_q = Some(eval.q);
        policy = improved;
        last_change = policy_change;
    }
    Err(Error::Convergence {
        msg: format!("policy iteration exceeded {max_iterations} rounds"),
        residual: last_change,
    })
}
