//! Plans (fixed-length action sequences), their index encoding, dense
//! plan-value tables, and the exact distribution a policy induces over
//! plans from a start state.

use crate::error::{Error, Result};

use super::mdp::{TabularMdp, TabularPolicy};

/// Hard cap on the number of plans |A|^k a single table may hold.
pub const PLAN_SPACE_GUARD: usize = 1_000_000;

/// Number of length-k plans over `n_actions` actions, guarded against
/// overflowing [`PLAN_SPACE_GUARD`].
pub fn num_plans(n_actions: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Contract("plan length k must be at least 1".into()));
    }
    let mut n: usize = 1;
    for _ in 0..k {
        n = n.checked_mul(n_actions).ok_or_else(|| plan_overflow(n_actions, k))?;
        if n > PLAN_SPACE_GUARD {
            return Err(plan_overflow(n_actions, k));
        }
    }
    Ok(n)
}

fn plan_overflow(n_actions: usize, k: usize) -> Error {
    Error::Capacity(format!(
        "plan space {n_actions}^{k} exceeds the guard of {PLAN_SPACE_GUARD}"
    ))
}

/// Encodes a plan as a base-|A| integer, first action most significant, so
/// plans enumerate in lexicographic order.
pub fn plan_index(n_actions: usize, actions: &[usize]) -> usize {
    actions.iter().fold(0, |idx, &a| {
        debug_assert!(a < n_actions);
        idx * n_actions + a
    })
}

/// Decodes a plan index back into its action sequence.
pub fn plan_actions(n_actions: usize, k: usize, mut index: usize) -> Vec<usize> {
    let mut actions = vec![0; k];
    for slot in actions.iter_mut().rev() {
        *slot = index % n_actions;
        index /= n_actions;
    }
    actions
}

/// Dense table of plan values, indexed by state and plan index.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanValueTable {
    k: usize,
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl PlanValueTable {
    /// All-zero table for an MDP and plan length.
    pub fn zeros(mdp: &TabularMdp, k: usize) -> Result<Self> {
        let n_plans = num_plans(mdp.n_actions(), k)?;
        Ok(Self {
            k,
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            values: vec![0.0; mdp.n_states() * n_plans],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of plans per state.
    pub fn n_plans(&self) -> usize {
        self.values.len() / self.n_states
    }

    /// Q(s, τ) by plan index.
    pub fn get(&self, s: usize, plan: usize) -> f64 {
        self.values[s * self.n_plans() + plan]
    }

    pub(crate) fn set(&mut self, s: usize, plan: usize, v: f64) {
        let n = self.n_plans();
        self.values[s * n + plan] = v;
    }

    /// Q(s, τ) by explicit action sequence.
    pub fn get_plan(&self, s: usize, actions: &[usize]) -> f64 {
        debug_assert_eq!(actions.len(), self.k);
        self.get(s, plan_index(self.n_actions, actions))
    }

    /// All plan values at one state, ordered by plan index.
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_plans()..][..self.n_plans()]
    }

    /// Largest absolute difference against another table of the same shape.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest entrywise decrease from `self` to `newer` (positive when some
    /// entry got worse).
    pub fn max_entrywise_drop(&self, newer: &Self) -> f64 {
        self.values
            .iter()
            .zip(&newer.values)
            .map(|(old, new)| old - new)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Checks the table matches an MDP and plan length.
    pub fn check_compatible(&self, mdp: &TabularMdp, k: usize) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() || self.k != k {
            return Err(Error::Shape(format!(
                "plan-value table is ({} states, {} actions, k={}) but expected ({}, {}, k={k})",
                self.n_states,
                self.n_actions,
                self.k,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Exact distribution over length-k plans from one start state.
#[derive(Debug, Clone)]
pub struct PlanDistribution {
    k: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PlanDistribution {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Probability of a plan by index.
    pub fn prob_index(&self, plan: usize) -> f64 {
        self.probs[plan]
    }

    /// Probability of an explicit action sequence.
    pub fn prob(&self, actions: &[usize]) -> f64 {
        self.probs[plan_index(self.n_actions, actions)]
    }

    /// Dense probabilities ordered by plan index.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Plans with positive probability, in plan-index order.
    pub fn support(&self) -> Vec<(Vec<usize>, f64)> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(idx, p)| (plan_actions(self.n_actions, self.k, idx), *p))
            .collect()
    }
}

/// Computes π^k(τ | s): the exact probability of each length-k plan when
/// actions are drawn from `policy` and intermediate states from the MDP
/// kernel. Plans sharing a prefix share the forward pass.
pub fn plan_distribution(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    state: usize,
    k: usize,
) -> Result<PlanDistribution> {
    policy.check_compatible(mdp)?;
    if state >= mdp.n_states() {
        return Err(Error::Shape(format!("start state {state} out of range")));
    }
    let n_plans = num_plans(mdp.n_actions(), k)?;
    let mut probs = vec![0.0; n_plans];
    let mut start = vec![0.0; mdp.n_states()];
    start[state] = 1.0;
    descend(mdp, policy, k, 0, 0, &start, &mut probs);
    Ok(PlanDistribution { k, n_actions: mdp.n_actions(), probs })
}

/// Forward recursion over plan prefixes. `weights[s]` is the joint
/// probability of being in state s after taking the prefix.
fn descend(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    k: usize,
    depth: usize,
    prefix: usize,
    weights: &[f64],
    probs: &mut [f64],
) {
    if depth == k {
        probs[prefix] = weights.iter().sum();
        return;
    }
    let n_states = mdp.n_states();
    for a in 0..mdp.n_actions() {
        let mut next = vec![0.0; n_states];
        for s in 0..n_states {
            let w = weights[s] * policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            let row = mdp.transition_row(s, a);
            for s2 in 0..n_states {
                next[s2] += w * row[s2];
            }
        }
        descend(mdp, policy, k, depth + 1, prefix * mdp.n_actions() + a, &next, probs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: enumerate state paths explicitly.
    fn path_prob(mdp: &TabularMdp, pol: &TabularPolicy, s: usize, actions: &[usize]) -> f64 {
        match actions.split_first() {
            None => 1.0,
            Some((&a, rest)) => {
                pol.prob(s, a)
                    * (0..mdp.n_states())
                        .map(|s2| mdp.p(s, a, s2) * path_prob(mdp, pol, s2, rest))
                        .sum::<f64>()
            }
        }
    }

    #[test]
    fn plan_index_round_trips() {
        for idx in 0..27 {
            let actions = plan_actions(3, 3, idx);
            assert_eq!(plan_index(3, &actions), idx);
        }
        assert_eq!(plan_index(2, &[1, 0]), 2);
        assert_eq!(plan_actions(2, 2, 2), vec![1, 0]);
    }

    #[test]
    fn guard_rejects_oversized_plan_spaces() {
        assert!(matches!(num_plans(8, 7), Err(Error::Capacity(_))));
        assert!(matches!(num_plans(2, 0), Err(Error::Contract(_))));
        assert_eq!(num_plans(4, 3).unwrap(), 64);
    }

    #[test]
    fn toggle_mdp_plan_probabilities() {
        // π(a=1|·) = 0.3 from state 0 with k = 2: deterministic dynamics,
        // so the plan probability is the product of the two action draws.
        let mdp = TabularMdp::two_state_toggle();
        let pol = TabularPolicy::from_probs(2, 2, vec![0.7, 0.3, 0.7, 0.3]).unwrap();
        let dist = plan_distribution(&mdp, &pol, 0, 2).unwrap();
        assert!((dist.prob(&[1, 1]) - 0.09).abs() < 1e-15);
        assert!((dist.prob(&[1, 0]) - 0.21).abs() < 1e-15);
        assert!((dist.prob(&[0, 1]) - 0.21).abs() < 1e-15);
        assert!((dist.prob(&[0, 0]) - 0.49).abs() < 1e-15);
        assert_eq!(dist.support().len(), 4);
    }

    #[test]
    fn matches_path_enumeration_on_a_stochastic_mdp() {
        // 3 states, 2 actions, dense random-ish kernel written out by hand.
        let t = vec![
            0.5, 0.3, 0.2, /**/ 0.1, 0.6, 0.3, //
            0.2, 0.2, 0.6, /**/ 0.9, 0.05, 0.05, //
            0.3, 0.3, 0.4, /**/ 0.25, 0.5, 0.25,
        ];
        let r = vec![0.0, 1.0, 0.5, -1.0, 0.25, 2.0];
        let mdp = TabularMdp::new(3, 2, 0.9, t, r).unwrap();
        let pol =
            TabularPolicy::from_probs(3, 2, vec![0.4, 0.6, 0.8, 0.2, 0.5, 0.5]).unwrap();
        for s in 0..3 {
            for k in 1..=3 {
                let dist = plan_distribution(&mdp, &pol, s, k).unwrap();
                let mut total = 0.0;
                for idx in 0..dist.probs().len() {
                    let actions = plan_actions(2, k, idx);
                    let oracle = path_prob(&mdp, &pol, s, &actions);
                    assert!(
                        (dist.prob_index(idx) - oracle).abs() < 1e-14,
                        "s={s} k={k} plan {actions:?}"
                    );
                    total += dist.prob_index(idx);
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
