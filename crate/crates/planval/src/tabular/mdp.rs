//! Finite MDPs and stationary policies as dense tables, plus a plain-text
//! interchange format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A finite MDP: transition kernel P[s][a][s'], expected rewards R[s][a],
/// and a discount factor γ ∈ (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<f64>,
    reward: Vec<f64>,
}

/// Tolerance for transition rows summing to one.
const ROW_SUM_TOL: f64 = 1e-12;

impl TabularMdp {
    /// Builds and validates an MDP from dense row-major tables.
    ///
    /// `transition` is indexed `[s][a][s']`, `reward` is `[s][a]`. Every
    /// transition row must be non-negative and sum to 1 within 1e-12.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("MDP needs at least one state and action".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Shape(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if !gamma.is_finite() || gamma <= 0.0 || gamma >= 1.0 {
            return Err(Error::Config(format!("discount must lie in (0, 1), got {gamma}")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward entry".into()));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::Numeric(format!(
                        "transition row ({s}, {a}) has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Shape(format!(
                        "transition row ({s}, {a}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(Self { n_states, n_actions, gamma, transition, reward })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Transition probability P(s' | s, a).
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    /// The full next-state distribution for (s, a).
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    /// Expected reward R(s, a).
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Two-state reference MDP used throughout the tests: action 0 stays,
    /// action 1 toggles the state, reward 1 exactly when acting from state 1,
    /// γ = 0.9. Its optimal values are V = (9, 10).
    pub fn two_state_toggle() -> Self {
        let transition = vec![
            // s=0: stay, toggle
            1.0, 0.0, 0.0, 1.0, //
            // s=1: stay, toggle
            0.0, 1.0, 1.0, 0.0,
        ];
        let reward = vec![0.0, 0.0, 1.0, 1.0];
        Self::new(2, 2, 0.9, transition, reward).expect("reference MDP is valid")
    }

    /// Serializes to the `tabular-mdp v1` text format.
    ///
    /// Header `tabular-mdp v1 <n_states> <n_actions> <gamma>`, then one line
    /// per (state, action): `s a r p_0 … p_{n_states-1}`. Floats are written
    /// with 17 significant digits so values round-trip bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "tabular-mdp v1 {} {} {}",
            self.n_states,
            self.n_actions,
            fmt_f64(self.gamma)
        );
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let _ = write!(out, "{s} {a} {}", fmt_f64(self.r(s, a)));
                for s2 in 0..self.n_states {
                    let _ = write!(out, " {}", fmt_f64(self.p(s, a, s2)));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the `tabular-mdp v1` text format.
    ///
    /// Every (state, action) row must appear exactly once, in any order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("empty MDP file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "tabular-mdp" || fields[1] != "v1" {
            return Err(Error::Config(format!("bad MDP header: {header:?}")));
        }
        let n_states: usize = parse_field(fields[2], "n_states")?;
        let n_actions: usize = parse_field(fields[3], "n_actions")?;
        let gamma: f64 = parse_field(fields[4], "gamma")?;
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config("MDP header declares zero states or actions".into()));
        }

        let mut transition = vec![f64::NAN; n_states * n_actions * n_states];
        let mut reward = vec![f64::NAN; n_states * n_actions];
        let mut seen = vec![false; n_states * n_actions];
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 + n_states {
                return Err(Error::Config(format!(
                    "MDP row has {} fields, expected {}: {line:?}",
                    toks.len(),
                    3 + n_states
                )));
            }
            let s: usize = parse_field(toks[0], "state")?;
            let a: usize = parse_field(toks[1], "action")?;
            if s >= n_states || a >= n_actions {
                return Err(Error::Config(format!("state/action out of range in row {line:?}")));
            }
            if seen[s * n_actions + a] {
                return Err(Error::Config(format!("duplicate row for state {s} action {a}")));
            }
            seen[s * n_actions + a] = true;
            reward[s * n_actions + a] = parse_field(toks[2], "reward")?;
            for s2 in 0..n_states {
                transition[(s * n_actions + a) * n_states + s2] =
                    parse_field(toks[3 + s2], "probability")?;
            }
        }
        if let Some(idx) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "missing row for state {} action {}",
                idx / n_actions,
                idx % n_actions
            )));
        }
        Self::new(n_states, n_actions, gamma, transition, reward)
    }

    /// Writes the text format to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Reads the text format from a file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// 17 significant digits: enough for f64 values to round-trip exactly.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_field<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Config(format!("cannot parse {what} from {tok:?}")))
}

/// A stationary stochastic policy as a dense table π(a | s).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

/// Tolerance for policy rows summing to one.
const POLICY_ROW_TOL: f64 = 1e-9;

impl TabularPolicy {
    /// Uniform policy over all actions.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy from one action index per state.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::Shape(format!(
                "got {} actions for {} states",
                actions.len(),
                n_states
            )));
        }
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Shape(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states, n_actions, probs })
    }

    /// Validates an explicit probability table (row-major `[s][a]`).
    pub fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..][..n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Numeric(format!("policy row {s} has a bad entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > POLICY_ROW_TOL {
                return Err(Error::Shape(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// π(a | s).
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// The action distribution at a state.
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    pub(crate) fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.probs[s * self.n_actions..][..self.n_actions]
    }

    /// The per-state action when every row is exactly one-hot.
    pub fn deterministic_actions(&self) -> Option<Vec<usize>> {
        let mut actions = Vec::with_capacity(self.n_states);
        for s in 0..self.n_states {
            let row = self.row(s);
            let a = row.iter().position(|p| *p == 1.0)?;
            if row.iter().enumerate().any(|(i, p)| i != a && *p != 0.0) {
                return None;
            }
            actions.push(a);
        }
        Some(actions)
    }

    /// Largest absolute probability difference against another policy.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Shannon entropy of the action distribution at a state (nats).
    pub fn entropy(&self, s: usize) -> f64 {
        -self
            .row(s)
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Checks the policy is defined over the same space as the MDP.
    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Shape(format!(
                "policy is {}x{} but MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}
