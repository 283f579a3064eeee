//! Exact dynamic-programming oracles: optimal control, policy evaluation and
//! discounted occupancy, all by dense linear solves over the state space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
pub use crate::policy::DeterministicPolicy;
use crate::policy::{greedy_index, Policy};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

const MAX_POLICY_ROUNDS: usize = 500;
const MAX_SWEEPS: usize = 1_000_000;

/// State-action value table, row-major `[state][action]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * self.n_actions + action] = value;
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn max(&self, state: usize) -> f64 {
        self.row(state).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy_action(&self, state: usize) -> usize {
        greedy_index(self.row(state))
    }

    pub fn greedy(&self) -> DeterministicPolicy {
        let actions = (0..self.n_states).map(|s| self.greedy_action(s)).collect();
        DeterministicPolicy::new(actions, self.n_actions).expect("greedy actions are in range")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_reward(mdp: &TabularMdp, reward: &[f64]) -> Result<()> {
    if reward.len() != mdp.n_states() {
        return Err(Error::LengthMismatch {
            left: reward.len(),
            right: mdp.n_states(),
        });
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::Precondition("reward entries must be finite".into()));
    }
    Ok(())
}

/// `Q(s, a) = R(s) + gamma * sum_s' T(s, a, s') V(s')`.
fn backup(mdp: &TabularMdp, reward: &[f64], values: &[f64]) -> QTable {
    let gamma = mdp.discount();
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let expected: f64 = mdp.transition_row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
            q.set(s, a, reward[s] + gamma * expected);
        }
    }
    q
}

fn state_values(q: &QTable) -> Vec<f64> {
    (0..q.n_states()).map(|s| q.max(s)).collect()
}

/// Sup-norm Bellman optimality residual of `q`.
pub fn bellman_residual(mdp: &TabularMdp, reward: &[f64], q: &QTable) -> f64 {
    let next = backup(mdp, reward, &state_values(q));
    next.values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Optimal action values and the greedy policy for `reward` under the
/// dynamics and discount of `mdp`.
///
/// Policy-iteration rounds with exact evaluation get close to the fixed point
/// in a handful of solves; Bellman sweeps then run until the sup-norm residual
/// is at most `tol`. Ties go to the lowest action index.
pub fn value_iteration(mdp: &TabularMdp, reward: &[f64], tol: f64) -> Result<(QTable, DeterministicPolicy)> {
    check_reward(mdp, reward)?;
    if !(tol > 0.0) {
        return Err(Error::Precondition(format!("tolerance must be positive, got {tol}")));
    }
    let mut policy = DeterministicPolicy::constant(mdp.n_states(), mdp.n_actions(), 0)?;
    let mut q = backup(mdp, reward, &policy_evaluation(mdp, reward, &policy)?);
    for _ in 0..MAX_POLICY_ROUNDS {
        let improved = q.greedy();
        if improved == policy {
            break;
        }
        policy = improved;
        q = backup(mdp, reward, &policy_evaluation(mdp, reward, &policy)?);
    }
    let mut sweeps = 0;
    while bellman_residual(mdp, reward, &q) > tol {
        q = backup(mdp, reward, &state_values(&q));
        sweeps += 1;
        if sweeps > MAX_SWEEPS {
            return Err(Error::Solver("value iteration did not reach tolerance".into()));
        }
    }
    let policy = q.greedy();
    Ok((q, policy))
}

fn evaluation_matrix<P: Policy>(mdp: &TabularMdp, policy: &P) -> Result<DMatrix<f64>> {
    let ns = mdp.n_states();
    let p = mdp.policy_transition(policy)?;
    let gamma = mdp.discount();
    Ok(DMatrix::from_fn(ns, ns, |i, j| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - gamma * p[i * ns + j]
    }))
}

/// Solves `(I - gamma P_pi) U = r` exactly.
pub fn policy_evaluation<P: Policy>(mdp: &TabularMdp, reward: &[f64], policy: &P) -> Result<Vec<f64>> {
    check_reward(mdp, reward)?;
    let a = evaluation_matrix(mdp, policy)?;
    let b = DVector::from_column_slice(reward);
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Solver("singular policy evaluation system".into()))?;
    Ok(x.iter().copied().collect())
}

/// Discounted visitation table of a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    n_states: usize,
    discount: f64,
    /// `psi[s][s']`, row-major.
    psi: Vec<f64>,
}

impl OccupancyTable {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Discounted expected visits of `to` starting from `from`.
    pub fn psi(&self, from: usize, to: usize) -> f64 {
        self.psi[from * self.n_states + to]
    }

    pub fn psi_row(&self, from: usize) -> &[f64] {
        &self.psi[from * self.n_states..(from + 1) * self.n_states]
    }

    /// Row `from` scaled to a probability vector.
    pub fn normalized_row(&self, from: usize) -> Vec<f64> {
        let scale = 1.0 - self.discount;
        self.psi_row(from).iter().map(|v| v * scale).collect()
    }

    pub fn normalized(&self, from: usize, to: usize) -> f64 {
        self.psi(from, to) * (1.0 - self.discount)
    }

    /// `sum_s' psi(s, s') r(s')` for every `s`.
    pub fn values(&self, reward: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| self.psi_row(s).iter().zip(reward).map(|(p, r)| p * r).sum())
            .collect()
    }
}

/// `Psi = (I - gamma P_pi)^-1`, whose row `s` holds the discounted visit weights
/// from start state `s`.
pub fn occupancy<P: Policy>(mdp: &TabularMdp, policy: &P) -> Result<OccupancyTable> {
    let ns = mdp.n_states();
    let inverse = evaluation_matrix(mdp, policy)?
        .try_inverse()
        .ok_or_else(|| Error::Solver("singular occupancy system".into()))?;
    let mut psi = Vec::with_capacity(ns * ns);
    for i in 0..ns {
        for j in 0..ns {
            psi.push(inverse[(i, j)]);
        }
    }
    Ok(OccupancyTable {
        n_states: ns,
        discount: mdp.discount(),
        psi,
    })
}

/// Expectation of `values` under the start distribution of `mdp`.
pub fn start_average(mdp: &TabularMdp, values: &[f64]) -> f64 {
    mdp.start_distribution().iter().zip(values).map(|(m, v)| m * v).sum()
}
