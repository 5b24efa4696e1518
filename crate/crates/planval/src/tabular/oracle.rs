//! Classic value iteration, used as an independent reference when checking
//! the plan-value machinery.

use crate::error::{Error, Result};

use super::mdp::{TabularMdp, TabularPolicy};
use super::MAX_EVAL_SWEEPS;

/// Optimal values and the greedy policy they induce.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// V*(s).
    pub values: Vec<f64>,
    /// Q*(s, a), row-major over states.
    pub q: Vec<f64>,
    /// Greedy policy, ties broken toward the lowest action index.
    pub policy: TabularPolicy,
}

/// Runs V(s) ← max_a [ r(s, a) + γ Σ_{s'} P(s'|s, a) V(s') ] from V ≡ 0
/// until the sup-norm change drops below `tol`, then extracts Q* and the
/// greedy policy from the final sweep.
pub fn oracle_optimal(mdp: &TabularMdp, tol: f64) -> Result<OracleSolution> {
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance must be positive, got {tol}")));
    }
    let n_states = mdp.n_states();
    let n_actions = mdp.n_actions();
    let mut values = vec![0.0; n_states];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_EVAL_SWEEPS {
        let mut next = vec![f64::NEG_INFINITY; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let tail: f64 =
                    mdp.transition_row(s, a).iter().zip(&values).map(|(p, v)| p * v).sum();
                let qa = mdp.r(s, a) + mdp.gamma() * tail;
                if qa > next[s] {
                    next[s] = qa;
                }
            }
        }
        residual = values
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if residual < tol {
            let mut q = vec![0.0; n_states * n_actions];
            let mut actions = vec![0usize; n_states];
            for s in 0..n_states {
                let mut best = 0;
                for a in 0..n_actions {
                    let tail: f64 = mdp
                        .transition_row(s, a)
                        .iter()
                        .zip(&values)
                        .map(|(p, v)| p * v)
                        .sum();
                    q[s * n_actions + a] = mdp.r(s, a) + mdp.gamma() * tail;
                    if q[s * n_actions + a] > q[s * n_actions + best] {
                        best = a;
                    }
                }
                actions[s] = best;
            }
            let policy = TabularPolicy::deterministic(n_states, n_actions, &actions)?;
            return Ok(OracleSolution { values, q, policy });
        }
    }
    Err(Error::Convergence {
        msg: format!("value iteration exceeded {MAX_EVAL_SWEEPS} sweeps"),
        residual,
    })
}
