//! Exact plan-value reinforcement learning on finite MDPs.
//!
//! Ordinary action values score one action at a state; a plan value
//! Q(s, τ) scores the next k actions τ = (a_0, …, a_{k-1}) taken together.
//! The stationary policy π induces a distribution over plans,
//!
//!   π^k(τ | s) = E[ Π_m π(a_m | s_m) ],
//!
//! with intermediate states drawn from the transition kernel, and the
//! extended Bellman operator
//!
//!   (T Q)(s, τ) = E[ Σ_{m<k} γ^m r_m ] + γ^k E[ V(s_k) ],
//!   V(s) = E_{τ ~ π^k(·|s)}[ Q(s, τ) ]
//!
//! contracts with factor γ^k. This module implements the operator, exact
//! policy evaluation on it, greedy and entropy-regularized policy
//! improvement over plan values, and the full policy-iteration loop, all
//! in exact arithmetic over dense tables. A classic value-iteration oracle
//! is included for cross-checking solutions.

mod backup;
mod improve;
mod mdp;
mod oracle;
mod plan;
mod ppi;

pub use backup::{
    bellman_backup, evaluate_policy, evaluate_policy_default, PlanBackup, PolicyEvaluation,
};
pub use improve::{improve_policy, POLICY_SPACE_GUARD};
pub use mdp::{TabularMdp, TabularPolicy};
pub use oracle::{oracle_optimal, OracleSolution};
pub use plan::{
    num_plans, plan_actions, plan_index, PlanDistribution, PlanValueTable, PLAN_SPACE_GUARD,
};
pub use plan::plan_distribution;
pub use ppi::{planning_policy_iteration, PpiIteration, PpiOutcome};

/// Default sup-norm tolerance for iterative policy evaluation.
pub const DEFAULT_EVAL_TOL: f64 = 1e-10;

/// Hard cap on evaluation sweeps before reporting a convergence failure.
pub const MAX_EVAL_SWEEPS: usize = 100_000;

/// Default cap on policy-iteration rounds.
pub const DEFAULT_PPI_MAX_ITERS: usize = 1_000;
