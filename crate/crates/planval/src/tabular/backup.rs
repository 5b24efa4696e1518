//! The extended Bellman operator over plan values and exact policy
//! evaluation built on it.

use crate::error::{Error, Result};

use super::mdp::{TabularMdp, TabularPolicy};
use super::plan::{num_plans, plan_distribution, PlanValueTable};
use super::{DEFAULT_EVAL_TOL, MAX_EVAL_SWEEPS};

/// Materialize the k-step transition table only while it stays this small.
const KSTEP_TABLE_LIMIT: usize = 1 << 24;

/// Precomputed pieces of the operator
///
///   (T Q)(s, τ) = r_k(s, τ) + γ^k Σ_{s'} P_k(s' | s, τ) · V(s'),
///   V(s) = Σ_τ π^k(τ | s) Q(s, τ)  (+ α · discounted window entropy when soft),
///
/// for one (MDP, policy, k) triple. Everything here depends only on the
/// policy and the kernel, so repeated sweeps reuse it.
pub struct PlanBackup<'a> {
    mdp: &'a TabularMdp,
    k: usize,
    n_plans: usize,
    /// Expected discounted k-step reward r_k[s][τ] under the forced plan.
    reward_k: Vec<f64>,
    /// k-step transition P_k[s][τ][s'] under the forced plan, when small
    /// enough to hold; recomputed on the fly otherwise.
    kernel_k: Option<Vec<f64>>,
    /// π^k(τ | s) for every state, plan-index order.
    plan_probs: Vec<f64>,
    /// Σ_{m<k} γ^m E[H(π(· | s_m))] from each start state, for soft backups.
    window_entropy: Vec<f64>,
}

impl<'a> PlanBackup<'a> {
    /// Builds the operator for a policy and plan length.
    pub fn new(mdp: &'a TabularMdp, policy: &'a TabularPolicy, k: usize) -> Result<Self> {
        policy.check_compatible(mdp)?;
        let n_plans = num_plans(mdp.n_actions(), k)?;
        let n_states = mdp.n_states();

        let materialize = n_states * n_plans * n_states <= KSTEP_TABLE_LIMIT;
        let mut reward_k = vec![0.0; n_states * n_plans];
        let mut kernel_k = materialize.then(|| vec![0.0; n_states * n_plans * n_states]);

        for s0 in 0..n_states {
            let mut start = vec![0.0; n_states];
            start[s0] = 1.0;
            forced_descend(
                mdp,
                k,
                0,
                0,
                &start,
                0.0,
                &mut |prefix, weights, reward| {
                    reward_k[s0 * n_plans + prefix] = reward;
                    if let Some(kernel) = kernel_k.as_deref_mut() {
                        kernel[(s0 * n_plans + prefix) * n_states..][..n_states]
                            .copy_from_slice(weights);
                    }
                },
            );
        }

        let mut plan_probs = vec![0.0; n_states * n_plans];
        for s in 0..n_states {
            let dist = plan_distribution(mdp, policy, s, k)?;
            plan_probs[s * n_plans..][..n_plans].copy_from_slice(dist.probs());
        }

        let window_entropy = window_entropy(mdp, policy, k);

        Ok(Self { mdp, k, n_plans, reward_k, kernel_k, plan_probs, window_entropy })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// π^k(τ | s) under the operator's policy.
    pub fn plan_prob(&self, s: usize, plan: usize) -> f64 {
        self.plan_probs[s * self.n_plans + plan]
    }

    /// V(s) = E_{τ ~ π^k}[ Q(s, τ) ], plus the α-weighted discounted window
    /// entropy in the soft case.
    pub fn state_values(&self, q: &PlanValueTable, soft: bool, alpha: f64) -> Vec<f64> {
        let n_states = self.mdp.n_states();
        let mut v = vec![0.0; n_states];
        for s in 0..n_states {
            let probs = &self.plan_probs[s * self.n_plans..][..self.n_plans];
            let mut acc = 0.0;
            for (p, qv) in probs.iter().zip(q.row(s)) {
                acc += p * qv;
            }
            if soft {
                acc += alpha * self.window_entropy[s];
            }
            v[s] = acc;
        }
        v
    }

    /// Applies the operator once.
    pub fn apply(&self, q: &PlanValueTable, soft: bool, alpha: f64) -> Result<PlanValueTable> {
        q.check_compatible(self.mdp, self.k)?;
        check_soft_alpha(soft, alpha)?;
        let v = self.state_values(q, soft, alpha);
        let n_states = self.mdp.n_states();
        let discount_k = self.mdp.gamma().powi(self.k as i32);
        let mut out = PlanValueTable::zeros(self.mdp, self.k)?;

        if let Some(kernel) = self.kernel_k.as_deref() {
            for s in 0..n_states {
                for plan in 0..self.n_plans {
                    let row = &kernel[(s * self.n_plans + plan) * n_states..][..n_states];
                    let tail: f64 = row.iter().zip(&v).map(|(p, vs)| p * vs).sum();
                    out.set(s, plan, self.reward_k[s * self.n_plans + plan] + discount_k * tail);
                }
            }
        } else {
            for s0 in 0..n_states {
                let mut start = vec![0.0; n_states];
                start[s0] = 1.0;
                forced_descend(self.mdp, self.k, 0, 0, &start, 0.0, &mut |prefix, w, reward| {
                    let tail: f64 = w.iter().zip(&v).map(|(p, vs)| p * vs).sum();
                    out.set(s0, prefix, reward + discount_k * tail);
                });
            }
        }
        Ok(out)
    }
}

/// Recursion over forced action prefixes: `weights[s]` is the state
/// distribution after executing the prefix, `reward` the accumulated
/// discounted expected reward. Calls `emit` once per complete plan.
fn forced_descend(
    mdp: &TabularMdp,
    k: usize,
    depth: usize,
    prefix: usize,
    weights: &[f64],
    reward: f64,
    emit: &mut impl FnMut(usize, &[f64], f64),
) {
    if depth == k {
        emit(prefix, weights, reward);
        return;
    }
    let n_states = mdp.n_states();
    let discount = mdp.gamma().powi(depth as i32);
    for a in 0..mdp.n_actions() {
        let mut step_reward = 0.0;
        let mut next = vec![0.0; n_states];
        for s in 0..n_states {
            let w = weights[s];
            if w == 0.0 {
                continue;
            }
            step_reward += w * mdp.r(s, a);
            let row = mdp.transition_row(s, a);
            for s2 in 0..n_states {
                next[s2] += w * row[s2];
            }
        }
        forced_descend(
            mdp,
            k,
            depth + 1,
            prefix * mdp.n_actions() + a,
            &next,
            reward + discount * step_reward,
            emit,
        );
    }
}

/// Σ_{m<k} γ^m E_{s_m}[ H(π(· | s_m)) ] from each start state, with the
/// state marginals d_m evolved under the policy.
fn window_entropy(mdp: &TabularMdp, policy: &TabularPolicy, k: usize) -> Vec<f64> {
    let n_states = mdp.n_states();
    let mut out = vec![0.0; n_states];
    for (s0, slot) in out.iter_mut().enumerate() {
        let mut d = vec![0.0; n_states];
        d[s0] = 1.0;
        let mut acc = 0.0;
        for m in 0..k {
            let discount = mdp.gamma().powi(m as i32);
            for s in 0..n_states {
                if d[s] > 0.0 {
                    acc += discount * d[s] * policy.entropy(s);
                }
            }
            if m + 1 < k {
                let mut next = vec![0.0; n_states];
                for s in 0..n_states {
                    if d[s] == 0.0 {
                        continue;
                    }
                    for a in 0..mdp.n_actions() {
                        let w = d[s] * policy.prob(s, a);
                        if w == 0.0 {
                            continue;
                        }
                        let row = mdp.transition_row(s, a);
                        for s2 in 0..n_states {
                            next[s2] += w * row[s2];
                        }
                    }
                }
                d = next;
            }
        }
        *slot = acc;
    }
    out
}

pub(super) fn check_soft_alpha(soft: bool, alpha: f64) -> Result<()> {
    if soft && (!alpha.is_finite() || alpha < 0.0) {
        return Err(Error::Contract(format!(
            "soft backups need a finite non-negative temperature, got {alpha}"
        )));
    }
    Ok(())
}

/// One application of the extended Bellman operator to a plan-value table.
pub fn bellman_backup(
    mdp: &TabularMdp,
    q: &PlanValueTable,
    policy: &TabularPolicy,
    soft: bool,
    alpha: f64,
) -> Result<PlanValueTable> {
    PlanBackup::new(mdp, policy, q.k())?.apply(q, soft, alpha)
}

/// Result of iterating the operator to its fixed point.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    /// The (approximate) fixed point Q^π.
    pub q: PlanValueTable,
    /// Sweeps performed.
    pub sweeps: usize,
    /// Final sup-norm change between consecutive sweeps.
    pub residual: f64,
}

/// Iterates the backup from Q ≡ 0 until the sup-norm change drops below
/// `tol`. The operator contracts with factor γ^k, so this converges
/// geometrically; exceeding `max_sweeps` reports a convergence failure
/// carrying the last residual.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    k: usize,
    soft: bool,
    alpha: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<PolicyEvaluation> {
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance must be positive, got {tol}")));
    }
    check_soft_alpha(soft, alpha)?;
    let backup = PlanBackup::new(mdp, policy, k)?;
    let mut q = PlanValueTable::zeros(mdp, k)?;
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        let next = backup.apply(&q, soft, alpha)?;
        residual = q.sup_distance(&next);
        q = next;
        if residual < tol {
            return Ok(PolicyEvaluation { q, sweeps: sweep, residual });
        }
    }
    Err(Error::Convergence {
        msg: format!("policy evaluation exceeded {max_sweeps} sweeps"),
        residual,
    })
}

/// [`evaluate_policy`] with the default tolerance and sweep cap.
pub fn evaluate_policy_default(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    k: usize,
    soft: bool,
    alpha: f64,
) -> Result<PolicyEvaluation> {
    evaluate_policy(mdp, policy, k, soft, alpha, DEFAULT_EVAL_TOL, MAX_EVAL_SWEEPS)
}
