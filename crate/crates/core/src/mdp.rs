//! Finite MDPs, the corner-reward gridworld family, and a resettable simulator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::policy::{sample_categorical, Policy};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite discounted MDP with state-based rewards.
///
/// Rewards are collected for the state currently occupied, so the value of a
/// policy from `s` is `E[sum_t gamma^t R(s_t) | s_0 = s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flat `[state][action][next_state]` table.
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    start_distribution: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        start_distribution: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            start_distribution,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Builds an MDP from a deterministic successor table `next[state][action]`.
    pub fn deterministic(
        next: &[Vec<usize>],
        reward: Vec<f64>,
        discount: f64,
        start_distribution: Vec<f64>,
    ) -> Result<Self> {
        let n_states = next.len();
        let n_actions = next.first().map(|r| r.len()).unwrap_or(0);
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        for (s, row) in next.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: n_actions,
                });
            }
            for (a, &s2) in row.iter().enumerate() {
                check_index("next state", s2, n_states)?;
                transition[(s * n_actions + a) * n_states + s2] = 1.0;
            }
        }
        Self::new(n_states, n_actions, transition, reward, discount, start_distribution)
    }

    fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("state and action counts must be positive".into()));
        }
        if self.transition.len() != ns * na * ns {
            return Err(Error::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                self.transition.len(),
                ns * na * ns
            )));
        }
        for s in 0..ns {
            for a in 0..na {
                check_distribution(self.transition_row(s, a))
                    .map_err(|why| Error::InvalidMdp(format!("transition row ({s}, {a}) {why}")))?;
            }
        }
        if self.reward.len() != ns {
            return Err(Error::InvalidMdp(format!(
                "reward has {} entries for {ns} states",
                self.reward.len()
            )));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("reward entries must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidMdp(format!("discount {} outside [0, 1)", self.discount)));
        }
        if self.start_distribution.len() != ns {
            return Err(Error::InvalidMdp("start distribution length".into()));
        }
        check_distribution(&self.start_distribution)
            .map_err(|why| Error::InvalidMdp(format!("start distribution {why}")))?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    pub fn start_distribution(&self) -> &[f64] {
        &self.start_distribution
    }

    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let base = (state * self.n_actions + action) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn max_reward(&self) -> f64 {
        self.reward.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Errors unless every reward is non-negative.
    pub fn require_nonnegative_rewards(&self) -> Result<()> {
        match self.reward.iter().position(|&r| r < 0.0) {
            Some(s) => Err(Error::Hypothesis(format!(
                "reward {} at state {s} is negative",
                self.reward[s]
            ))),
            None => Ok(()),
        }
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward,
            self.discount,
            self.start_distribution.clone(),
        )
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        let mut out = self.clone();
        out.discount = discount;
        out.validate()?;
        Ok(out)
    }

    pub fn with_start_distribution(&self, start: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.start_distribution = start;
        out.validate()?;
        Ok(out)
    }

    /// The state-to-state matrix under `policy`, row-major `[s][s']`.
    pub fn policy_transition<P: Policy>(&self, policy: &P) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let ns = self.n_states;
        let mut out = vec![0.0; ns * ns];
        for s in 0..ns {
            let row = &mut out[s * ns..(s + 1) * ns];
            for a in 0..self.n_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                for (dst, &t) in row.iter_mut().zip(self.transition_row(s, a)) {
                    *dst += p * t;
                }
            }
        }
        Ok(out)
    }

    pub fn check_policy<P: Policy>(&self, policy: &P) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::Precondition(format!(
                "policy shape {}x{} does not match mdp {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    pub fn sample_next_state<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        sample_categorical(self.transition_row(state, action), rng)
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.start_distribution, rng)
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err("has a negative or non-finite entry".into());
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

/// Gridworld moves, in action-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Left,
    Right,
    Up,
    Down,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Left, Move::Right, Move::Up, Move::Down];

    pub fn from_index(a: usize) -> Option<Move> {
        Self::ALL.get(a).copied()
    }

    pub fn glyph(self) -> char {
        match self {
            Move::Left => '<',
            Move::Right => '>',
            Move::Up => '^',
            Move::Down => 'v',
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
            Move::Up => (0, -1),
            Move::Down => (0, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCell {
    pub x: usize,
    pub y: usize,
    pub reward: f64,
}

/// Rectangular gridworld with rewarding cells. Cell `(x, y)` has state index
/// `y * width + x`; `y = 0` is the top row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub reward_cells: Vec<RewardCell>,
    pub teleport_on_reward: bool,
    pub discount: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self::four_corners(5, 5, 1.0)
    }
}

impl GridworldSpec {
    pub fn four_corners(width: usize, height: usize, reward: f64) -> Self {
        let mut cells = vec![(0, 0), (width - 1, 0), (0, height - 1), (width - 1, height - 1)];
        cells.sort_by_key(|&(x, y)| (y, x));
        cells.dedup();
        Self {
            width,
            height,
            reward_cells: cells.into_iter().map(|(x, y)| RewardCell { x, y, reward }).collect(),
            teleport_on_reward: true,
            discount: 0.99,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn state_of(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_of(&self, state: usize) -> (usize, usize) {
        (state % self.width, state / self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid("width and height must be positive".into()));
        }
        for cell in &self.reward_cells {
            if cell.x >= self.width || cell.y >= self.height {
                return Err(Error::InvalidGrid(format!(
                    "reward cell ({}, {}) lies outside the {}x{} grid",
                    cell.x, cell.y, self.width, self.height
                )));
            }
            if !cell.reward.is_finite() {
                return Err(Error::InvalidGrid("reward values must be finite".into()));
            }
        }
        Ok(())
    }

    /// Successor of a move with boundary clamping, ignoring teleports.
    pub fn step(&self, state: usize, mv: Move) -> usize {
        let (x, y) = self.cell_of(state);
        let (dx, dy) = mv.delta();
        let nx = (x as i64 + dx).clamp(0, self.width as i64 - 1) as usize;
        let ny = (y as i64 + dy).clamp(0, self.height as i64 - 1) as usize;
        self.state_of(nx, ny)
    }

    /// States `(x, y)` with `x < width / 2`.
    pub fn left_half(&self) -> impl Fn(usize) -> bool + '_ {
        move |s| self.cell_of(s).0 < self.width / 2
    }
}

/// Builds the gridworld MDP.
///
/// Reward cells pay their reward while occupied. With teleporting enabled,
/// every action taken from a reward cell moves the agent to a uniformly random
/// cell, so each arrival at a reward cell pays exactly once before the jump.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let ns = spec.n_cells();
    let na = Move::ALL.len();
    let mut reward = vec![0.0; ns];
    for cell in &spec.reward_cells {
        reward[spec.state_of(cell.x, cell.y)] += cell.reward;
    }
    let rewarding: Vec<bool> = reward.iter().map(|&r| r != 0.0).collect();
    let mut transition = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for (a, &mv) in Move::ALL.iter().enumerate() {
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            if spec.teleport_on_reward && rewarding[s] {
                row.iter_mut().for_each(|p| *p = 1.0 / ns as f64);
            } else {
                row[spec.step(s, mv)] = 1.0;
            }
        }
    }
    TabularMdp::new(ns, na, transition, reward, spec.discount, vec![1.0 / ns as f64; ns])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    /// Environment reward of `state`.
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: usize,
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Visited states `s_0 .. s_{T-1}`.
    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|t| t.state)
    }
}

/// Rolls out exactly `cutoff` steps of `policy` from a caller-chosen state.
pub fn simulate_trajectory<P: Policy, R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &P,
    start: usize,
    cutoff: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    check_index("start state", start, mdp.n_states())?;
    mdp.check_policy(policy)?;
    if cutoff == 0 {
        return Err(Error::Precondition("cutoff must be at least 1".into()));
    }
    let mut steps = Vec::with_capacity(cutoff);
    let mut state = start;
    for _ in 0..cutoff {
        let action = policy.sample_action(state, rng);
        let next_state = mdp.sample_next_state(state, action, rng);
        steps.push(Transition {
            state,
            action,
            reward: mdp.reward()[state],
            next_state,
        });
        state = next_state;
    }
    Ok(Trajectory { start, steps })
}

/// Zeroes the reward of every state outside `region`.
pub fn restrict_rewards(mdp: &TabularMdp, region: impl Fn(usize) -> bool) -> TabularMdp {
    let mut out = mdp.clone();
    for (s, r) in out.reward.iter_mut().enumerate() {
        if !region(s) {
            *r = 0.0;
        }
    }
    out
}
