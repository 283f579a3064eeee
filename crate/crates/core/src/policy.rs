//! Policies over a finite state space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance under which two action values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index of the largest entry, preferring the lowest index among ties.
///
/// Values within `TIE_TOLERANCE * max(1, |best|)` of the best are treated as
/// ties, so that floating-point noise between mathematically equal action
/// values cannot flip the choice.
pub fn greedy_index(values: &[f64]) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let slack = TIE_TOLERANCE * best.abs().max(1.0);
    values.iter().position(|&v| v >= best - slack).unwrap_or(0)
}

/// Every index tied with the largest entry under the same tolerance as
/// [`greedy_index`].
pub fn greedy_set(values: &[f64]) -> Vec<usize> {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let slack = TIE_TOLERANCE * best.abs().max(1.0);
    (0..values.len()).filter(|&i| values[i] >= best - slack).collect()
}

pub trait Policy {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Probability of `action` in `state`.
    fn prob(&self, state: usize, action: usize) -> f64;
    fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize;

    fn action_distribution(&self, state: usize) -> Vec<f64> {
        (0..self.n_actions()).map(|a| self.prob(state, a)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    n_actions: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::Precondition("policy needs at least one action".into()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::OutOfRange {
                what: "action",
                index: bad,
                limit: n_actions,
            });
        }
        Ok(Self { n_actions, actions })
    }

    pub fn constant(n_states: usize, n_actions: usize, action: usize) -> Result<Self> {
        Self::new(vec![action; n_states], n_actions)
    }

    pub fn action(&self, state: usize) -> usize {
        self.actions[state]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

impl Policy for DeterministicPolicy {
    fn n_states(&self) -> usize {
        self.actions.len()
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn prob(&self, state: usize, action: usize) -> f64 {
        if self.actions[state] == action {
            1.0
        } else {
            0.0
        }
    }

    fn sample_action<R: Rng + ?Sized>(&self, state: usize, _rng: &mut R) -> usize {
        self.actions[state]
    }
}

/// Tabular stochastic policy, one probability row per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map(|r| r.len()).unwrap_or(0);
        if n_actions == 0 {
            return Err(Error::Precondition("policy needs at least one action".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * n_actions);
        for row in &rows {
            if row.len() != n_actions {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: n_actions,
                });
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Precondition(format!(
                    "policy row is not a distribution (sum {total})"
                )));
            }
            probs.extend_from_slice(row);
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }
}

impl Policy for StochasticPolicy {
    fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(state), rng)
    }
}

/// Draws an index from a probability vector by inverse CDF.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
