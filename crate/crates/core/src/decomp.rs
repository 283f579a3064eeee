//! Reward decomposition learner.
//!
//! The environment reward of each state is split across `n` factors by a
//! per-state softmax over a logit table. The learner maximizes the
//! disentanglement objective
//!
//! ```text
//! J_dis = E_{s~mu}[ sum_i a_ii(s) U_i^{pi_i}(s) ] - E_{s~mu}[ sum_{i!=j} a_ij(s) U_i^{pi_j}(s) ]
//! ```
//!
//! where `U_i^{pi_j}` is the value of factor reward `i` while following the
//! policy that pursues factor `j`. Gradients are taken with the policies and
//! the weights `a_ij` held fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::mdp::{simulate_trajectory, TabularMdp};
use crate::metrics;
use crate::planner::{self, DeterministicPolicy, OccupancyTable, QTable, DEFAULT_TOLERANCE};
use crate::qlearn::{
    epsilon_at, epsilon_greedy_action, q_minibatch_update, EpsilonSchedule, Experience, PolicySet, ReplayBuffer,
    DEFAULT_LEARNING_RATE,
};

/// Per-state logit table defining a softmax reward split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionParams {
    n_states: usize,
    n_factors: usize,
    /// Row-major `[state][factor]`.
    logits: Vec<f64>,
    version: u64,
}

impl DecompositionParams {
    pub fn zeros(n_states: usize, n_factors: usize) -> Result<Self> {
        Self::from_logits(n_states, n_factors, vec![0.0; n_states * n_factors])
    }

    pub fn from_logits(n_states: usize, n_factors: usize, logits: Vec<f64>) -> Result<Self> {
        if n_factors == 0 {
            return Err(Error::Precondition("at least one factor is required".into()));
        }
        if logits.len() != n_states * n_factors {
            return Err(Error::LengthMismatch {
                left: logits.len(),
                right: n_states * n_factors,
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Precondition("logits must be finite".into()));
        }
        Ok(Self {
            n_states,
            n_factors,
            logits,
            version: 0,
        })
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_factors: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        let logits = (0..n_states * n_factors).map(|_| normal.sample(rng)).collect();
        Self::from_logits(n_states, n_factors, logits)
    }

    /// Every rewarding state of `reward` assigned wholly to `owner[s]`, using
    /// logit `saturation` for the owner and 0 elsewhere.
    pub fn from_assignment(n_factors: usize, owner: &[usize], saturation: f64) -> Result<Self> {
        let mut params = Self::zeros(owner.len(), n_factors)?;
        for (s, &k) in owner.iter().enumerate() {
            check_index("factor", k, n_factors)?;
            params.logits_mut(s)[k] = saturation;
        }
        Ok(params)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn raw(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits(&self, state: usize) -> &[f64] {
        &self.logits[state * self.n_factors..(state + 1) * self.n_factors]
    }

    pub fn logits_mut(&mut self, state: usize) -> &mut [f64] {
        self.version += 1;
        &mut self.logits[state * self.n_factors..(state + 1) * self.n_factors]
    }

    /// Softmax of the logits at `state`.
    pub fn shares(&self, state: usize) -> Vec<f64> {
        softmax(self.logits(state))
    }

    pub fn share(&self, state: usize, factor: usize) -> f64 {
        self.shares(state)[factor]
    }

    /// Factor reward vectors, indexed `[factor][state]`.
    pub fn factor_rewards(&self, env_reward: &[f64]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_states]; self.n_factors];
        for (s, &r) in env_reward.iter().enumerate().take(self.n_states) {
            for (i, p) in self.shares(s).into_iter().enumerate() {
                out[i][s] = r * p;
            }
        }
        out
    }

    /// Factor owning the largest share at `state` (lowest index on ties).
    pub fn argmax_factor(&self, state: usize) -> usize {
        crate::policy::greedy_index(self.logits(state))
    }

    pub fn ascend(&mut self, gradient: &LogitGradient, step: f64) {
        for (l, g) in self.logits.iter_mut().zip(&gradient.values) {
            *l += step * g;
        }
        self.version += 1;
    }

    fn stepped(&self, gradient: &LogitGradient, step: f64) -> Self {
        let mut out = self.clone();
        out.ascend(gradient, step);
        out
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `R(s) * softmax(F(s))`.
pub fn softmax_decompose(params: &DecompositionParams, state: usize, env_reward: f64) -> Vec<f64> {
    params.shares(state).into_iter().map(|p| env_reward * p).collect()
}

/// Objective weights `a_ij(s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaScheme {
    Uniform {
        c: f64,
    },
    /// Diagonal weights are `scale` times a softmax of `-temperature * U_ii`;
    /// off-diagonal weights are 1.
    SoftenedMin {
        scale: f64,
        temperature: f64,
    },
}

impl Default for AlphaScheme {
    fn default() -> Self {
        AlphaScheme::SoftenedMin {
            scale: 10.0,
            temperature: 2.0,
        }
    }
}

impl AlphaScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaScheme::Uniform { c } if !c.is_finite() => {
                Err(Error::Config("uniform alpha constant must be finite".into()))
            }
            AlphaScheme::SoftenedMin { scale, temperature } if !(scale > 0.0 && temperature > 0.0) => Err(
                Error::Config("softened-min scale and temperature must be positive".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn uniform_constant(&self) -> Option<f64> {
        match *self {
            AlphaScheme::Uniform { c } => Some(c),
            AlphaScheme::SoftenedMin { .. } => None,
        }
    }
}

/// Square `n x n` weight matrix for one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AlphaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    fn abs_sum(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// One weight matrix per state.
pub type AlphaField = Vec<AlphaMatrix>;

pub fn alpha_weights(scheme: &AlphaScheme, diag_values: &[f64]) -> AlphaMatrix {
    let n = diag_values.len();
    let values = match *scheme {
        AlphaScheme::Uniform { c } => vec![c; n * n],
        AlphaScheme::SoftenedMin { scale, temperature } => {
            let negated: Vec<f64> = diag_values.iter().map(|u| -temperature * u).collect();
            let soft = softmax(&negated);
            let mut values = vec![1.0; n * n];
            for (i, w) in soft.into_iter().enumerate() {
                values[i * n + i] = scale * w;
            }
            values
        }
    };
    AlphaMatrix { n, values }
}

/// Values `U_i^{pi_j}(s)` for every factor `i`, policy `j` and state `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorValues {
    n_factors: usize,
    n_states: usize,
    /// `[i][j][s]`.
    values: Vec<f64>,
}

impl FactorValues {
    pub fn get(&self, factor: usize, policy: usize, state: usize) -> f64 {
        self.values[(factor * self.n_factors + policy) * self.n_states + state]
    }

    pub fn diagonal(&self, state: usize) -> Vec<f64> {
        (0..self.n_factors).map(|i| self.get(i, i, state)).collect()
    }
}

/// Scores of one decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub j_independent: f64,
    pub j_nontrivial: f64,
    pub j_disentangled: f64,
    /// `value_matrix[i][j]` is the start-averaged `U_i^{pi_j}`.
    pub value_matrix: Vec<Vec<f64>>,
    /// `per_state_values[s][i][j]`.
    pub per_state_values: Vec<Vec<Vec<f64>>>,
    /// `alpha_snapshot[s][i][j]`.
    pub alpha_snapshot: Vec<Vec<Vec<f64>>>,
    pub alpha_scheme: AlphaScheme,
}

impl ObjectiveReport {
    /// Start-averaged `U_i^{pi_i}` for each factor.
    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.value_matrix.len()).map(|i| self.value_matrix[i][i]).collect()
    }
}

/// Objective with policies and weights frozen. It is linear in the factor
/// rewards: `J = sum_{i, s'} w_i(s') R_i(s')`.
#[derive(Clone, Debug)]
pub struct FrozenObjective {
    n_factors: usize,
    n_states: usize,
    env_reward: Vec<f64>,
    /// `[i][s']`.
    weights: Vec<f64>,
}

impl FrozenObjective {
    pub fn new(mdp: &TabularMdp, occupancies: &[OccupancyTable], alpha: &AlphaField) -> Self {
        let ns = mdp.n_states();
        let n = occupancies.len();
        let mu = mdp.start_distribution();
        let mut weights = vec![0.0; n * ns];
        for s in 0..ns {
            if mu[s] == 0.0 {
                continue;
            }
            for (j, occ) in occupancies.iter().enumerate() {
                let row = occ.psi_row(s);
                for i in 0..n {
                    let sign = if i == j { 1.0 } else { -1.0 };
                    let coef = mu[s] * sign * alpha[s].get(i, j);
                    if coef == 0.0 {
                        continue;
                    }
                    for (w, psi) in weights[i * ns..(i + 1) * ns].iter_mut().zip(row) {
                        *w += coef * psi;
                    }
                }
            }
        }
        Self {
            n_factors: n,
            n_states: ns,
            env_reward: mdp.reward().to_vec(),
            weights,
        }
    }

    fn weight(&self, factor: usize, state: usize) -> f64 {
        self.weights[factor * self.n_states + state]
    }

    pub fn value(&self, params: &DecompositionParams) -> f64 {
        let mut total = 0.0;
        for s in 0..self.n_states {
            let r = self.env_reward[s];
            if r == 0.0 {
                continue;
            }
            for (i, p) in params.shares(s).into_iter().enumerate() {
                total += self.weight(i, s) * r * p;
            }
        }
        total
    }

    /// `dJ/dF_k(s) = R(s) p_k (w_k(s) - sum_i w_i(s) p_i)`.
    pub fn gradient(&self, params: &DecompositionParams) -> LogitGradient {
        let mut grad = LogitGradient::zeros(self.n_states, self.n_factors);
        for s in 0..self.n_states {
            let r = self.env_reward[s];
            if r == 0.0 {
                continue;
            }
            let p = params.shares(s);
            let mean: f64 = (0..self.n_factors).map(|i| self.weight(i, s) * p[i]).sum();
            for k in 0..self.n_factors {
                grad.values[s * self.n_factors + k] = r * p[k] * (self.weight(k, s) - mean);
            }
        }
        grad
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitGradient {
    n_states: usize,
    n_factors: usize,
    values: Vec<f64>,
}

impl LogitGradient {
    pub fn zeros(n_states: usize, n_factors: usize) -> Self {
        Self {
            n_states,
            n_factors,
            values: vec![0.0; n_states * n_factors],
        }
    }

    pub fn get(&self, state: usize, factor: usize) -> f64 {
        self.values[state * self.n_factors + factor]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_factors..(state + 1) * self.n_factors]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &LogitGradient) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Everything computed for one decomposition and one set of policies.
#[derive(Clone, Debug)]
pub struct ObjectiveAnalysis {
    pub policies: Vec<DeterministicPolicy>,
    /// Optimal tables when the policies were planned, `None` when supplied.
    pub q_tables: Option<Vec<QTable>>,
    pub occupancies: Vec<OccupancyTable>,
    pub values: FactorValues,
    pub alpha: AlphaField,
    pub report: ObjectiveReport,
}

impl ObjectiveAnalysis {
    pub fn frozen(&self, mdp: &TabularMdp) -> FrozenObjective {
        FrozenObjective::new(mdp, &self.occupancies, &self.alpha)
    }
}

/// Optimal Q-tables for each factor reward.
pub fn optimal_tables(mdp: &TabularMdp, params: &DecompositionParams) -> Result<Vec<QTable>> {
    params
        .factor_rewards(mdp.reward())
        .iter()
        .map(|r| planner::value_iteration(mdp, r, DEFAULT_TOLERANCE).map(|(q, _)| q))
        .collect()
}

/// Exact evaluation of the objective. With `policies == None` each factor's
/// optimal policy is planned first.
pub fn analyze(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    scheme: &AlphaScheme,
    policies: Option<&[DeterministicPolicy]>,
) -> Result<ObjectiveAnalysis> {
    let ns = mdp.n_states();
    let n = params.n_factors();
    if params.n_states() != ns {
        return Err(Error::LengthMismatch {
            left: params.n_states(),
            right: ns,
        });
    }
    let (policies, q_tables) = match policies {
        Some(p) => {
            if p.len() != n {
                return Err(Error::LengthMismatch {
                    left: p.len(),
                    right: n,
                });
            }
            (p.to_vec(), None)
        }
        None => {
            let tables = optimal_tables(mdp, params)?;
            (tables.iter().map(QTable::greedy).collect(), Some(tables))
        }
    };
    let occupancies = policies
        .iter()
        .map(|pi| planner::occupancy(mdp, pi))
        .collect::<Result<Vec<_>>>()?;
    let rewards = params.factor_rewards(mdp.reward());
    let mut values = Vec::with_capacity(n * n * ns);
    for r in &rewards {
        for occ in &occupancies {
            values.extend(occ.values(r));
        }
    }
    let values = FactorValues {
        n_factors: n,
        n_states: ns,
        values,
    };
    let alpha: AlphaField = (0..ns).map(|s| alpha_weights(scheme, &values.diagonal(s))).collect();
    let report = build_report(mdp, &values, &alpha, scheme);
    Ok(ObjectiveAnalysis {
        policies,
        q_tables,
        occupancies,
        values,
        alpha,
        report,
    })
}

fn build_report(mdp: &TabularMdp, values: &FactorValues, alpha: &AlphaField, scheme: &AlphaScheme) -> ObjectiveReport {
    let n = values.n_factors;
    let ns = values.n_states;
    let mu = mdp.start_distribution();
    let mut j_independent = 0.0;
    let mut j_nontrivial = 0.0;
    let mut value_matrix = vec![vec![0.0; n]; n];
    let mut per_state_values = Vec::with_capacity(ns);
    for s in 0..ns {
        let mut here = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let u = values.get(i, j, s);
                here[i][j] = u;
                value_matrix[i][j] += mu[s] * u;
                let weighted = mu[s] * alpha[s].get(i, j) * u;
                if i == j {
                    j_nontrivial += weighted;
                } else {
                    j_independent += weighted;
                }
            }
        }
        per_state_values.push(here);
    }
    ObjectiveReport {
        j_independent,
        j_nontrivial,
        j_disentangled: j_nontrivial - j_independent,
        value_matrix,
        per_state_values,
        alpha_snapshot: alpha.iter().map(AlphaMatrix::to_rows).collect(),
        alpha_scheme: *scheme,
    }
}

pub fn evaluate_objective(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    scheme: &AlphaScheme,
    policies: Option<&[DeterministicPolicy]>,
) -> Result<ObjectiveReport> {
    analyze(mdp, params, scheme, policies).map(|a| a.report)
}

/// Exact gradient of the objective through discounted occupancies, with
/// policies and weights frozen at their current values.
pub fn gradient_exact(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    scheme: &AlphaScheme,
    policies: Option<&[DeterministicPolicy]>,
) -> Result<LogitGradient> {
    let analysis = analyze(mdp, params, scheme, policies)?;
    Ok(analysis.frozen(mdp).gradient(params))
}

/// Truncated Monte-Carlo gradient estimate.
///
/// For each start state and each policy `j`, one `cutoff`-step trajectory is
/// rolled out and `sum_t gamma^t dR_i(s_t)/dF` is accumulated for every
/// factor `i` with the weights of the start state. The result is the mean over
/// start states.
pub fn gradient_mc<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    policies: &[DeterministicPolicy],
    alpha: &AlphaField,
    starts: &[usize],
    cutoff: usize,
    rng: &mut R,
) -> Result<LogitGradient> {
    let ns = mdp.n_states();
    let n = params.n_factors();
    if policies.len() != n {
        return Err(Error::LengthMismatch {
            left: policies.len(),
            right: n,
        });
    }
    if alpha.len() != ns {
        return Err(Error::LengthMismatch {
            left: alpha.len(),
            right: ns,
        });
    }
    if starts.is_empty() {
        return Err(Error::Empty("start states"));
    }
    let gamma = mdp.discount();
    let env_reward = mdp.reward();
    let mut grad = LogitGradient::zeros(ns, n);
    let mut coef = vec![0.0; n];
    for &start in starts {
        check_index("start state", start, ns)?;
        let weights = &alpha[start];
        for (j, pi) in policies.iter().enumerate() {
            let traj = simulate_trajectory(mdp, pi, start, cutoff, rng)?;
            let mut discount = 1.0;
            for state in traj.states() {
                let r = env_reward[state];
                if r != 0.0 {
                    for (i, c) in coef.iter_mut().enumerate() {
                        let sign = if i == j { 1.0 } else { -1.0 };
                        *c = sign * weights.get(i, j) * discount;
                    }
                    let p = params.shares(state);
                    let mean: f64 = coef.iter().zip(&p).map(|(c, q)| c * q).sum();
                    for k in 0..n {
                        grad.values[state * n + k] += r * p[k] * (coef[k] - mean);
                    }
                }
                discount *= gamma;
            }
        }
    }
    let scale = 1.0 / starts.len() as f64;
    grad.values.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

/// Largest entrywise gap between the `cutoff`-truncated gradient and the
/// untruncated one: `gamma^T / (1 - gamma) * R_max * 1/4 * max_s sum_ij |a_ij(s)|`.
/// A softmax Jacobian entry never exceeds 1/4 in magnitude.
pub fn truncation_bound(mdp: &TabularMdp, alpha: &AlphaField, cutoff: usize) -> f64 {
    let gamma = mdp.discount();
    let r_max = mdp.reward().iter().map(|r| r.abs()).fold(0.0, f64::max);
    let weight = alpha.iter().map(AlphaMatrix::abs_sum).fold(0.0, f64::max);
    gamma.powi(cutoff as i32) / (1.0 - gamma) * r_max * 0.25 * weight
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerMode {
    /// Planned optimal policies and occupancy gradients with a line search.
    Exact,
    /// Replay-buffer Q-learning and truncated rollout gradients.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainerMode,
    pub n_factors: usize,
    pub alpha: AlphaScheme,
    /// Ascent step size (initial trial step in exact mode).
    pub learning_rate: f64,
    pub rollout_cutoff: usize,
    pub reward_update_period: u64,
    pub policy_update_period: u64,
    pub replay_capacity: usize,
    pub minibatch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_horizon: u64,
    /// Steps between resamples of the behavior factor.
    pub resample_period: u64,
    /// Environment steps in sampled mode, ascent steps in exact mode.
    pub total_steps: u64,
    /// Sampled-mode steps before any learning update.
    pub warmup: u64,
    pub n_runs: usize,
    pub discount: f64,
    pub q_learning_rate: f64,
    pub log_interval: u64,
    /// Standard deviation of the initial logits.
    pub init_scale: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: TrainerMode::Exact,
            n_factors: 4,
            alpha: AlphaScheme::default(),
            learning_rate: 0.1,
            rollout_cutoff: 10,
            reward_update_period: 20,
            policy_update_period: 4,
            replay_capacity: 10_000,
            minibatch_size: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_horizon: 20_000,
            resample_period: 50,
            total_steps: 300,
            warmup: 0,
            n_runs: 4,
            discount: 0.99,
            q_learning_rate: DEFAULT_LEARNING_RATE,
            log_interval: 10,
            init_scale: 0.1,
        }
    }
}

impl TrainerConfig {
    pub fn sampled() -> Self {
        Self {
            mode: TrainerMode::Sampled,
            total_steps: 200_000,
            warmup: 1_000,
            log_interval: 5_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_factors == 0 {
            return bad("n_factors must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if self.rollout_cutoff == 0
            || self.reward_update_period == 0
            || self.policy_update_period == 0
            || self.resample_period == 0
            || self.log_interval == 0
            || self.minibatch_size == 0
            || self.replay_capacity == 0
        {
            return bad("periods, sizes and the rollout cutoff must be at least 1");
        }
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if !(self.q_learning_rate >= 0.0 && self.q_learning_rate <= 1.0) {
            return bad("q_learning_rate must lie in [0, 1]");
        }
        if !(self.init_scale >= 0.0) {
            return bad("init_scale must be non-negative");
        }
        if self.total_steps <= self.warmup {
            return Err(Error::Config(format!(
                "total_steps {} must exceed warmup {}",
                self.total_steps, self.warmup
            )));
        }
        EpsilonSchedule::new(self.epsilon_start, self.epsilon_end, self.epsilon_horizon)?;
        self.alpha.validate()
    }

    fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            horizon: self.epsilon_horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub report: ObjectiveReport,
    /// Visit-weighted saturation of the parameters at this step; absent when
    /// undefined (one factor or no rewarding state).
    pub avg_saturation: Option<f64>,
}

impl LogEntry {
    fn new(mdp: &TabularMdp, params: &DecompositionParams, visits: &[f64], step: u64, report: ObjectiveReport) -> Self {
        Self {
            step,
            report,
            avg_saturation: metrics::average_saturation(mdp, params, visits).ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Factor `i` is trivial when its start-averaged `U_i^{pi_i}` is below
    /// `1e-3 * R_max / (1 - gamma)`.
    pub trivial: Vec<bool>,
    /// Where gradient start states came from.
    pub start_source: String,
    /// Accepted ascent steps (exact mode) or reward updates (sampled mode).
    pub reward_updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub seed: u64,
    pub mode: TrainerMode,
    pub params: DecompositionParams,
    pub policies: PolicySet,
    pub history: Vec<LogEntry>,
    pub diagnostics: Diagnostics,
}

impl TrainResult {
    pub fn final_report(&self) -> &ObjectiveReport {
        &self.history.last().expect("history is never empty").report
    }

    pub fn final_score(&self) -> f64 {
        self.final_report().j_disentangled
    }
}

pub fn trivial_flags(report: &ObjectiveReport, mdp: &TabularMdp) -> Vec<bool> {
    let r_max = mdp.reward().iter().map(|r| r.abs()).fold(0.0, f64::max);
    let threshold = 1e-3 * r_max / (1.0 - mdp.discount());
    report.diagonal_values().into_iter().map(|u| u < threshold).collect()
}

/// Trains one decomposition from `seed`.
pub fn train(mdp: &TabularMdp, config: &TrainerConfig, seed: u64) -> Result<TrainResult> {
    config.validate()?;
    let mdp = mdp.with_discount(config.discount)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DecompositionParams::random(mdp.n_states(), config.n_factors, config.init_scale, &mut rng)?;
    run_trainer(&mdp, config, seed, params, &mut rng)
}

/// Trains from given initial parameters instead of a random draw. With
/// `learning_rate == 0` in sampled mode the decomposition stays fixed while
/// the per-factor learners train on it.
pub fn train_with_params(
    mdp: &TabularMdp,
    config: &TrainerConfig,
    seed: u64,
    params: DecompositionParams,
) -> Result<TrainResult> {
    config.validate()?;
    if params.n_factors() != config.n_factors || params.n_states() != mdp.n_states() {
        return Err(Error::Precondition(format!(
            "parameters are {}x{}, expected {}x{}",
            params.n_states(),
            params.n_factors(),
            mdp.n_states(),
            config.n_factors
        )));
    }
    let mdp = mdp.with_discount(config.discount)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_trainer(&mdp, config, seed, params, &mut rng)
}

fn run_trainer(
    mdp: &TabularMdp,
    config: &TrainerConfig,
    seed: u64,
    params: DecompositionParams,
    rng: &mut ChaCha8Rng,
) -> Result<TrainResult> {
    let visits = metrics::random_policy_visits(mdp)?;
    match config.mode {
        TrainerMode::Exact => train_exact(mdp, config, seed, params, &visits),
        TrainerMode::Sampled => train_sampled(mdp, config, seed, params, &visits, rng),
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

/// Backtracking ascent step on a frozen objective. Returns the accepted step
/// size, or `None` when no trial step improved the objective.
pub fn line_search_step(frozen: &FrozenObjective, params: &mut DecompositionParams, initial_step: f64) -> Option<f64> {
    let grad = frozen.gradient(params);
    let slope = grad.norm_squared();
    if slope == 0.0 {
        return None;
    }
    let base = frozen.value(params);
    let mut step = initial_step;
    for _ in 0..MAX_HALVINGS {
        let trial = params.stepped(&grad, step);
        if frozen.value(&trial) >= base + ARMIJO * step * slope {
            *params = trial;
            return Some(step);
        }
        step *= 0.5;
    }
    None
}

fn train_exact(
    mdp: &TabularMdp,
    config: &TrainerConfig,
    seed: u64,
    mut params: DecompositionParams,
    visits: &[f64],
) -> Result<TrainResult> {
    let mut history = Vec::new();
    let mut accepted = 0;
    let mut step = 0;
    let final_analysis = loop {
        let analysis = analyze(mdp, &params, &config.alpha, None)?;
        if step % config.log_interval == 0 || step == config.total_steps {
            history.push(LogEntry::new(mdp, &params, visits, step, analysis.report.clone()));
        }
        if step == config.total_steps {
            break analysis;
        }
        let frozen = analysis.frozen(mdp);
        if line_search_step(&frozen, &mut params, config.learning_rate).is_some() {
            accepted += 1;
        }
        step += 1;
    };
    let tables = final_analysis.q_tables.expect("exact mode plans its policies");
    Ok(TrainResult {
        seed,
        mode: TrainerMode::Exact,
        diagnostics: Diagnostics {
            trivial: trivial_flags(&final_analysis.report, mdp),
            start_source: "start_distribution".into(),
            reward_updates: accepted,
        },
        params,
        policies: PolicySet::from_tables(tables, config.q_learning_rate)?,
        history,
    })
}

/// Weights from the diagonal values implied by the learned tables.
pub fn sampled_alpha_field(
    mdp: &TabularMdp,
    params: &DecompositionParams,
    policies: &PolicySet,
    scheme: &AlphaScheme,
) -> AlphaField {
    let rewards = params.factor_rewards(mdp.reward());
    let diag: Vec<Vec<f64>> = (0..policies.len())
        .map(|i| policies.state_values(i, &rewards[i], mdp.discount()))
        .collect();
    (0..mdp.n_states())
        .map(|s| {
            let here: Vec<f64> = diag.iter().map(|d| d[s]).collect();
            alpha_weights(scheme, &here)
        })
        .collect()
}

fn train_sampled(
    mdp: &TabularMdp,
    config: &TrainerConfig,
    seed: u64,
    mut params: DecompositionParams,
    visits: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<TrainResult> {
    let n = config.n_factors;
    let gamma = mdp.discount();
    let schedule = config.epsilon_schedule();
    let mut policies = PolicySet::new(n, mdp.n_states(), mdp.n_actions(), config.q_learning_rate);
    let mut buffer = ReplayBuffer::new(config.replay_capacity)?;
    let mut history = Vec::new();
    let mut updates = 0;
    let mut active = rng.random_range(0..n);
    let mut state = mdp.sample_start(rng);
    for t in 0..config.total_steps {
        if t % config.log_interval == 0 {
            let report = evaluate_objective(mdp, &params, &config.alpha, Some(&policies.greedy_policies()))?;
            history.push(LogEntry::new(mdp, &params, visits, t, report));
        }
        let epsilon = epsilon_at(&schedule, t);
        let action = epsilon_greedy_action(policies.table(active), state, epsilon, rng);
        let next_state = mdp.sample_next_state(state, action, rng);
        buffer.push(Experience {
            state,
            action,
            reward: mdp.reward()[next_state],
            next_state,
        });
        state = next_state;
        if (t + 1) % config.resample_period == 0 {
            active = rng.random_range(0..n);
        }
        if t < config.warmup {
            continue;
        }
        if t % config.policy_update_period == 0 {
            for i in 0..n {
                let batch = buffer.sample(config.minibatch_size, rng);
                q_minibatch_update(&mut policies, i, &batch, &params, gamma)?;
            }
        }
        if config.learning_rate > 0.0 && t % config.reward_update_period == 0 {
            let starts: Vec<usize> = buffer
                .sample(config.minibatch_size, rng)
                .into_iter()
                .map(|e| e.state)
                .collect();
            let greedy = policies.greedy_policies();
            let alpha = sampled_alpha_field(mdp, &params, &policies, &config.alpha);
            let grad = gradient_mc(mdp, &params, &greedy, &alpha, &starts, config.rollout_cutoff, rng)?;
            params.ascend(&grad, config.learning_rate);
            updates += 1;
        }
    }
    let report = evaluate_objective(mdp, &params, &config.alpha, Some(&policies.greedy_policies()))?;
    let trivial = trivial_flags(&report, mdp);
    history.push(LogEntry::new(mdp, &params, visits, config.total_steps, report));
    Ok(TrainResult {
        seed,
        mode: TrainerMode::Sampled,
        params,
        policies,
        history,
        diagnostics: Diagnostics {
            trivial,
            start_source: "replay_buffer".into(),
            reward_updates: updates,
        },
    })
}

/// Index of the run with the largest final `J_disentangled`; ties go to the
/// lowest seed, then to the earliest position.
pub fn best_run_index(results: &[TrainResult]) -> Result<usize> {
    if results.is_empty() {
        return Err(Error::Empty("training results"));
    }
    let mut best = 0;
    for (idx, run) in results.iter().enumerate().skip(1) {
        let incumbent = &results[best];
        let (a, b) = (run.final_score(), incumbent.final_score());
        if a > b || (a == b && run.seed < incumbent.seed) {
            best = idx;
        }
    }
    Ok(best)
}

pub fn select_best_run(results: &[TrainResult]) -> Result<&TrainResult> {
    best_run_index(results).map(|i| &results[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, GridworldSpec};

    fn corners() -> (GridworldSpec, TabularMdp) {
        let spec = GridworldSpec::default();
        let mdp = build_gridworld(&spec).unwrap();
        (spec, mdp)
    }

    #[test]
    fn softmax_decompose_examples() {
        let mut params = DecompositionParams::zeros(1, 2).unwrap();
        assert_eq!(softmax_decompose(&params, 0, 1.0), vec![0.5, 0.5]);
        params.logits_mut(0).copy_from_slice(&[1.7, -3.0]);
        assert_eq!(softmax_decompose(&params, 0, 0.0), vec![0.0, 0.0]);
        params.logits_mut(0).copy_from_slice(&[3f64.ln(), 0.0]);
        let out = softmax_decompose(&params, 0, 1.0);
        assert!((out[0] - 0.75).abs() < 1e-15 && (out[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn negative_reward_shares_keep_sign() {
        let params = DecompositionParams::from_logits(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let out = softmax_decompose(&params, 0, -2.0);
        assert!(out.iter().all(|&x| x < 0.0));
        assert!((out.iter().sum::<f64>() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn softened_min_examples() {
        let scheme = AlphaScheme::default();
        let a = alpha_weights(&scheme, &[3.0, 3.0, 3.0, 3.0]);
        for i in 0..4 {
            assert!((a.get(i, i) - 2.5).abs() < 1e-12);
            for j in 0..4 {
                if i != j {
                    assert_eq!(a.get(i, j), 1.0);
                }
            }
        }
        let a = alpha_weights(&scheme, &[-1e6, 0.0, 1.0]);
        assert!((a.get(0, 0) - 10.0).abs() < 1e-12);
        assert!(a.get(1, 1) < 1e-12 && a.get(2, 2) < 1e-12);
        // exp(-2 * ln2 / 2) = 1/2
        let a = alpha_weights(&scheme, &[0.0, 2f64.ln() / 2.0]);
        assert!((a.get(0, 0) - 10.0 / 1.5).abs() < 1e-12);
        assert!((a.get(1, 1) - 5.0 / 1.5).abs() < 1e-12);
        assert!((a.diagonal().iter().sum::<f64>() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_alpha_is_constant() {
        let a = alpha_weights(&AlphaScheme::Uniform { c: 2.5 }, &[1.0, 7.0]);
        assert!(a.to_rows().iter().flatten().all(|&v| v == 2.5));
    }

    #[test]
    fn zero_reward_objective_is_zero() {
        let mdp = build_gridworld(&GridworldSpec {
            reward_cells: vec![],
            ..GridworldSpec::default()
        })
        .unwrap();
        let params = DecompositionParams::from_logits(25, 2, (0..50).map(|x| x as f64 * 0.1).collect()).unwrap();
        let report = evaluate_objective(&mdp, &params, &AlphaScheme::default(), None).unwrap();
        assert_eq!(
            (report.j_independent, report.j_nontrivial, report.j_disentangled),
            (0.0, 0.0, 0.0)
        );
        let grad = gradient_exact(&mdp, &params, &AlphaScheme::default(), None).unwrap();
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn disentangled_is_difference_of_terms() {
        let (_, mdp) = corners();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DecompositionParams::random(25, 3, 1.0, &mut rng).unwrap();
        let r = evaluate_objective(&mdp, &params, &AlphaScheme::default(), None).unwrap();
        assert!((r.j_disentangled - (r.j_nontrivial - r.j_independent)).abs() <= 1e-12);
    }

    #[test]
    fn uniform_alpha_terms_sum_to_total_value() {
        let (_, mdp) = corners();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = DecompositionParams::random(25, 4, 1.0, &mut rng).unwrap();
        let analysis = analyze(&mdp, &params, &AlphaScheme::Uniform { c: 1.0 }, None).unwrap();
        let total: f64 = analysis
            .policies
            .iter()
            .map(|pi| planner::start_average(&mdp, &planner::policy_evaluation(&mdp, mdp.reward(), pi).unwrap()))
            .sum();
        let r = &analysis.report;
        assert!((r.j_independent + r.j_nontrivial - total).abs() < 1e-9);
    }

    #[test]
    fn all_to_one_factor_scores_below_corner_split() {
        let (spec, mdp) = corners();
        let owner_one = vec![0; 25];
        let mut owner_split = vec![0; 25];
        for (k, cell) in spec.reward_cells.iter().enumerate() {
            owner_split[spec.state_of(cell.x, cell.y)] = k;
        }
        let one = DecompositionParams::from_assignment(4, &owner_one, 40.0).unwrap();
        let split = DecompositionParams::from_assignment(4, &owner_split, 40.0).unwrap();
        let scheme = AlphaScheme::default();
        let a = evaluate_objective(&mdp, &one, &scheme, None).unwrap();
        let b = evaluate_objective(&mdp, &split, &scheme, None).unwrap();
        assert!(
            a.j_disentangled < b.j_disentangled,
            "{} vs {}",
            a.j_disentangled,
            b.j_disentangled
        );
    }

    #[test]
    fn softmax_jacobian_rows_cancel() {
        // gradient of sum_i R_i is zero, so a weight vector equal across
        // factors gives zero gradient
        let (_, mdp) = corners();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DecompositionParams::random(25, 3, 2.0, &mut rng).unwrap();
        let frozen = FrozenObjective {
            n_factors: 3,
            n_states: 25,
            env_reward: mdp.reward().to_vec(),
            weights: (0..3).flat_map(|_| (0..25).map(|s| s as f64 + 1.0)).collect(),
        };
        let g = frozen.gradient(&params);
        assert!(g.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_factor_is_inert() {
        let (_, mdp) = corners();
        let config = TrainerConfig {
            n_factors: 1,
            total_steps: 5,
            log_interval: 1,
            ..TrainerConfig::default()
        };
        let result = train(&mdp, &config, 0).unwrap();
        let r = result.final_report();
        assert_eq!(r.j_independent, 0.0);
        assert_eq!(result.diagnostics.reward_updates, 0);
        assert!((0..25).all(|s| result.params.shares(s) == vec![1.0]));
    }

    #[test]
    fn budget_must_exceed_warmup() {
        let (_, mdp) = corners();
        let config = TrainerConfig {
            total_steps: 10,
            warmup: 10,
            ..TrainerConfig::sampled()
        };
        assert!(matches!(train(&mdp, &config, 0), Err(Error::Config(_))));
    }

    fn fake_run(seed: u64, score: f64) -> TrainResult {
        let report = ObjectiveReport {
            j_independent: 0.0,
            j_nontrivial: score,
            j_disentangled: score,
            value_matrix: vec![],
            per_state_values: vec![],
            alpha_snapshot: vec![],
            alpha_scheme: AlphaScheme::default(),
        };
        TrainResult {
            seed,
            mode: TrainerMode::Exact,
            params: DecompositionParams::zeros(1, 2).unwrap(),
            policies: PolicySet::new(2, 1, 1, 0.1),
            history: vec![LogEntry {
                step: 0,
                report,
                avg_saturation: None,
            }],
            diagnostics: Diagnostics {
                trivial: vec![false, false],
                start_source: String::new(),
                reward_updates: 0,
            },
        }
    }

    #[test]
    fn best_run_selection_rules() {
        assert!(best_run_index(&[]).is_err());
        assert_eq!(best_run_index(&[fake_run(0, 1.0)]).unwrap(), 0);
        let runs: Vec<_> = [3.1, 5.2, 5.2, 0.4]
            .iter()
            .enumerate()
            .map(|(i, &s)| fake_run(i as u64, s))
            .collect();
        assert_eq!(best_run_index(&runs).unwrap(), 1);
        let reversed = vec![fake_run(7, 5.2), fake_run(3, 5.2)];
        assert_eq!(select_best_run(&reversed).unwrap().seed, 3);
    }
}
