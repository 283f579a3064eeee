//! Tabular learners for the sampled trainer: per-factor Q-tables, a shared
//! replay buffer, and annealed epsilon-greedy behavior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::DecompositionParams;
use crate::error::{Error, Result};
use crate::planner::{DeterministicPolicy, QTable};

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

/// One Q-table per decomposed reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    tables: Vec<QTable>,
    learning_rate: f64,
    versions: Vec<u64>,
}

impl PolicySet {
    pub fn new(n_factors: usize, n_states: usize, n_actions: usize, learning_rate: f64) -> Self {
        Self {
            tables: vec![QTable::zeros(n_states, n_actions); n_factors],
            learning_rate,
            versions: vec![0; n_factors],
        }
    }

    /// Wraps tables produced elsewhere, e.g. by the planner.
    pub fn from_tables(tables: Vec<QTable>, learning_rate: f64) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::Empty("policy set"));
        }
        let shape = (tables[0].n_states(), tables[0].n_actions());
        if tables.iter().any(|t| (t.n_states(), t.n_actions()) != shape) {
            return Err(Error::Precondition("q-tables differ in shape".into()));
        }
        if tables.iter().any(|t| !t.is_finite()) {
            return Err(Error::Precondition("q-table entries must be finite".into()));
        }
        let versions = vec![0; tables.len()];
        Ok(Self {
            tables,
            learning_rate,
            versions,
        })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn table(&self, factor: usize) -> &QTable {
        &self.tables[factor]
    }

    pub fn tables(&self) -> &[QTable] {
        &self.tables
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn version(&self, factor: usize) -> u64 {
        self.versions[factor]
    }

    pub fn greedy(&self, factor: usize) -> DeterministicPolicy {
        self.tables[factor].greedy()
    }

    pub fn greedy_policies(&self) -> Vec<DeterministicPolicy> {
        self.tables.iter().map(QTable::greedy).collect()
    }

    /// State values implied by a table trained on arrival rewards:
    /// `U(s) = R_i(s) + gamma * max_a Q_i(s, a)`.
    pub fn state_values(&self, factor: usize, factor_reward: &[f64], discount: f64) -> Vec<f64> {
        let q = &self.tables[factor];
        (0..q.n_states())
            .map(|s| factor_reward[s] + discount * q.max(s))
            .collect()
    }
}

/// A stored step. `reward` is the environment reward observed on arrival at
/// `next_state`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Fixed-capacity FIFO ring of experiences.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer.iter())
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Experience> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, horizon: u64) -> Result<Self> {
        if !(0.0 <= end && end <= start && start <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon schedule needs 0 <= end <= start <= 1, got {start} -> {end}"
            )));
        }
        Ok(Self { start, end, horizon })
    }
}

/// Linear anneal from `start` to `end` over `horizon` steps, then constant.
pub fn epsilon_at(schedule: &EpsilonSchedule, step: u64) -> f64 {
    if schedule.horizon == 0 || step >= schedule.horizon {
        return schedule.end;
    }
    let frac = step as f64 / schedule.horizon as f64;
    schedule.start + (schedule.end - schedule.start) * frac
}

pub fn epsilon_greedy_action<R: Rng + ?Sized>(q: &QTable, state: usize, epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q.n_actions())
    } else {
        q.greedy_action(state)
    }
}

/// One tabular Q-learning update per transition.
pub fn q_update(q: &mut QTable, item: &Experience, reward: f64, discount: f64, learning_rate: f64) {
    let target = reward + discount * q.max(item.next_state);
    let old = q.get(item.state, item.action);
    q.set(item.state, item.action, old + learning_rate * (target - old));
}

/// Updates factor `factor` on `batch`, relabeling every reward to the
/// decomposed reward of the next state.
pub fn q_minibatch_update(
    set: &mut PolicySet,
    factor: usize,
    batch: &[Experience],
    params: &DecompositionParams,
    discount: f64,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    if factor >= set.len() {
        return Err(Error::OutOfRange {
            what: "factor",
            index: factor,
            limit: set.len(),
        });
    }
    let rate = set.learning_rate;
    let table = &mut set.tables[factor];
    for item in batch {
        let relabeled = params.share(item.next_state, factor) * item.reward;
        q_update(table, item, relabeled, discount, rate);
    }
    set.versions[factor] += 1;
    Ok(())
}
